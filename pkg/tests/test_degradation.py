"""Degradation operator, kernel generators and dataset synthesis."""

import os

import numpy as np
import pytest
import torch

from blindsr.degradation import (
    Kernel,
    KernelBankEntry,
    anisotropic_gaussian,
    blur_downsample,
    convolve_downsample,
    default_bank,
    delta,
    empty_square,
    filled_square,
    gaussian_bank,
    kernel_anchor,
    l_shape,
    measured_file,
    normalize_kernel,
    read_kernel_txt,
    read_manifest,
    synthesize_dataset,
    write_kernel_txt,
)
from blindsr.images import ImagePlane, center_crop_to_multiple, read_png, write_png

from oracles import conv_downsample_loops


def _rand_img(rng, h, w, c=1):
    return ImagePlane(rng.random((h, w, c)))


# --- operator ----------------------------------------------------------------


def test_delta_kernel_identity():
    rng = np.random.default_rng(0)
    img = _rand_img(rng, 8, 8)
    out = convolve_downsample(img, delta(3), 1)
    np.testing.assert_array_equal(out.pixels, img.pixels)


def test_delta_kernel_subsample_phase():
    # every s-th pixel starting at (0, 0)
    rng = np.random.default_rng(1)
    img = _rand_img(rng, 8, 8)
    out = convolve_downsample(img, delta(3), 2)
    np.testing.assert_array_equal(out.pixels, img.pixels[::2, ::2])


def test_shifted_delta_translates():
    rng = np.random.default_rng(2)
    img = _rand_img(rng, 12, 12)
    out = convolve_downsample(img, delta(5, offset=(1, 0)), 1)
    # interior rows are the input shifted down by one
    np.testing.assert_allclose(out.pixels[1:, :], img.pixels[:-1, :], atol=1e-12)


def test_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(12):
        s = int(rng.choice([1, 2, 4]))
        h = int(rng.integers(1, 6))
        w = int(rng.integers(1, 6))
        H = int(rng.integers(max(h, w), 17) // s * s)
        H = max(H, s * ((max(h, w) + s - 1) // s))
        c = int(rng.choice([1, 3]))
        img = _rand_img(rng, H, H, c)
        k = normalize_kernel(rng.random((h, w)) + 1e-3)
        got = convolve_downsample(img, k, s)
        want = conv_downsample_loops(img.pixels, k.values, s)
        assert got.pixels.shape == want.shape
        np.testing.assert_allclose(got.pixels, want, atol=1e-6)


def test_constant_image_conserved():
    img = ImagePlane(np.full((12, 12, 1), 0.37))
    k = normalize_kernel(np.random.default_rng(4).random((5, 5)))
    out = convolve_downsample(img, k, 4)
    np.testing.assert_allclose(out.pixels, 0.37, atol=1e-12)


def test_linear_in_image():
    rng = np.random.default_rng(5)
    a, b = _rand_img(rng, 8, 8), _rand_img(rng, 8, 8)
    k = normalize_kernel(rng.random((3, 3)))
    lhs = convolve_downsample(ImagePlane(0.5 * a.pixels + 2.0 * b.pixels), k, 2)
    rhs = 0.5 * convolve_downsample(a, k, 2).pixels + 2.0 * convolve_downsample(b, k, 2).pixels
    np.testing.assert_allclose(lhs.pixels, rhs, atol=1e-12)


def test_blur_downsample_differentiable():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    k = torch.rand(3, 3, dtype=torch.float64, requires_grad=True)
    out = blur_downsample(x, k, 2)
    out.sum().backward()
    assert x.grad is not None and torch.all(torch.isfinite(x.grad))
    assert k.grad is not None and torch.all(torch.isfinite(k.grad))


def test_operator_shape_errors():
    img = ImagePlane(np.zeros((9, 9, 1)))
    with pytest.raises(ValueError):
        convolve_downsample(img, delta(3), 2)  # 9 not a multiple of 2
    with pytest.raises(ValueError):
        convolve_downsample(ImagePlane(np.zeros((2, 2, 1))), delta(5), 1)


# --- kernels -----------------------------------------------------------------


def test_delta_generator_center():
    k = delta(5)
    assert k.values[2, 2] == 1.0 and k.values.sum() == 1.0
    assert kernel_anchor(5, 5) == (2, 2)


def test_filled_square_centered():
    k = filled_square(8, 4)
    assert (k.values > 0).sum() == 16
    np.testing.assert_allclose(k.values[2:6, 2:6], 1.0 / 16.0)
    assert k.values[:2].sum() == 0 and k.values[6:].sum() == 0


def test_empty_square_support():
    k = empty_square(9, 5, border=1)
    nz = k.values > 0
    assert nz.sum() == 5 * 5 - 3 * 3
    np.testing.assert_allclose(k.values[nz], 1.0 / 16.0)


def test_l_shape_support():
    arm, t = 10, 2
    k = l_shape(24, arm, t)
    assert (k.values > 0).sum() == 2 * arm * t - t * t
    cy, cx = k.centroid()
    assert cy > (24 - 1) / 2  # mass hangs below-left of center
    assert cx < (24 - 1) / 2


def test_gaussian_closed_form():
    # isotropic sigma=1 on a 7x7 canvas vs the density formula
    k = anisotropic_gaussian(7, 1.0, 1.0, 0.0)
    ii, jj = np.meshgrid(np.arange(7) - 3.0, np.arange(7) - 3.0, indexing="ij")
    ref = np.exp(-0.5 * (ii**2 + jj**2))
    ref /= ref.sum()
    np.testing.assert_allclose(k.values, ref, atol=1e-12)


def test_gaussian_rotation_swaps_axes():
    a = anisotropic_gaussian(15, 3.0, 1.0, 0.0)
    b = anisotropic_gaussian(15, 1.0, 3.0, np.pi / 2)
    np.testing.assert_allclose(a.values, b.values, atol=1e-10)


def test_normalize_and_validate():
    k = normalize_kernel(np.ones((4, 4)))
    k.validate()
    assert abs(k.values.sum() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        normalize_kernel(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Kernel(np.full((3, 3), 1.0 / 9.0) * np.array([[1, 1, 1], [1, -2, 1], [1, 1, 1]])).validate()


def test_kernel_txt_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    k = normalize_kernel(rng.random((5, 7)))
    p = tmp_path / "k.txt"
    write_kernel_txt(k, p)
    back = read_kernel_txt(p)
    np.testing.assert_array_equal(back.values, k.values)
    assert p.read_text().splitlines()[0] == "5 7"


def test_measured_file_resize(tmp_path):
    rng = np.random.default_rng(7)
    k = normalize_kernel(rng.random((11, 11)))
    p = tmp_path / "m.txt"
    write_kernel_txt(k, p)
    same = measured_file(p, 11)
    np.testing.assert_allclose(same.values, k.values, atol=1e-12)
    big = measured_file(p, 24)
    assert big.shape == (24, 24)
    assert abs(big.values.sum() - 1.0) < 1e-12
    assert big.values.min() >= 0.0


def test_bank_builders():
    bank = default_bank(canvas=24, seed=0)
    assert len(bank) == 12
    assert len({e.kernel_id for e in bank}) == 12
    for e in bank:
        k = e.make()
        k.validate()
        assert k.shape == (24, 24)
    # seeded determinism
    a = gaussian_bank(3, 24, seed=5)
    b = gaussian_bank(3, 24, seed=5)
    assert [e.params for e in a] == [e.params for e in b]


# --- synthesis ---------------------------------------------------------------


def _tiny_hr_dir(tmp_path, n=2, size=24):
    rng = np.random.default_rng(11)
    paths = []
    for i in range(n):
        p = tmp_path / f"im{i}.png"
        write_png(ImagePlane(rng.random((size, size, 3))), p)
        paths.append(p)
    return paths


def test_center_crop_to_multiple():
    img = ImagePlane(np.random.default_rng(8).random((37, 41, 1)))
    out = center_crop_to_multiple(img, 4)
    assert (out.height, out.width) == (36, 40)
    # crop is centered
    np.testing.assert_array_equal(out.pixels, img.pixels[0:36, 0:40])


def test_full_matrix_counts(tmp_path):
    hr = _tiny_hr_dir(tmp_path, n=2)
    bank = [KernelBankEntry("d", "delta", {"canvas": 3}),
            KernelBankEntry("g", "anisotropic_gaussian",
                            {"canvas": 5, "sigma_x": 1.0, "sigma_y": 1.0,
                             "theta": 0.0}),
            KernelBankEntry("s", "filled_square", {"canvas": 5, "side": 3})]
    recs = synthesize_dataset(hr, tmp_path / "out", bank, scale=2,
                              pairing="full_matrix", seed=0)
    assert len(recs) == 2 * 3
    for r in recs:
        assert os.path.exists(r.lr_path) and os.path.exists(r.hr_path)
        assert os.path.exists(r.kernel_path)
    lr_names = {r.lr_path for r in recs}
    assert len(lr_names) == 6  # one file per pair, traceable naming


def test_random_per_image_counts_and_determinism(tmp_path):
    hr = _tiny_hr_dir(tmp_path, n=3)
    bank = [KernelBankEntry("d", "delta", {"canvas": 3}),
            KernelBankEntry("s", "filled_square", {"canvas": 5, "side": 3})]
    recs1 = synthesize_dataset(hr, tmp_path / "o1", bank, scale=2,
                               pairing="random_per_image", seed=9)
    recs2 = synthesize_dataset(hr, tmp_path / "o2", bank, scale=2,
                               pairing="random_per_image", seed=9)
    assert len(recs1) == 3
    assert [r.kernel_id for r in recs1] == [r.kernel_id for r in recs2]
    m1 = (tmp_path / "o1" / "manifest.jsonl").read_text()
    m2 = (tmp_path / "o2" / "manifest.jsonl").read_text()
    assert m1.replace("o1", "o2") == m2  # byte-identical up to the root dir


def test_manifest_roundtrip(tmp_path):
    hr = _tiny_hr_dir(tmp_path, n=1)
    bank = [KernelBankEntry("d", "delta", {"canvas": 3})]
    recs = synthesize_dataset(hr, tmp_path / "out", bank, scale=2,
                              pairing="full_matrix", seed=0)
    back = read_manifest(tmp_path / "out" / "manifest.jsonl")
    assert back == recs


def test_lr_matches_operator(tmp_path):
    # files on disk reproduce convolve_downsample up to 8-bit quantization
    hr = _tiny_hr_dir(tmp_path, n=1)
    bank = [KernelBankEntry("s", "filled_square", {"canvas": 5, "side": 3})]
    recs = synthesize_dataset(hr, tmp_path / "out", bank, scale=2,
                              pairing="full_matrix", seed=0)
    hr_img = read_png(recs[0].hr_path)
    lr_img = read_png(recs[0].lr_path)
    want = convolve_downsample(hr_img, read_kernel_txt(recs[0].kernel_path), 2)
    assert np.abs(lr_img.pixels - np.clip(want.pixels, 0, 1)).max() <= 0.5 / 255 + 1e-9
