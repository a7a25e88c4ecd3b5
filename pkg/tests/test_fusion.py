"""Fusion loop mechanics on tiny instances: wiring, determinism, guards."""

import numpy as np
import pytest
import torch

from blindsr.degradation import convolve_downsample, filled_square
from blindsr.fusion import (
    FusionConfig,
    FusionDivergence,
    consistency_terms,
    fusion_inner_step,
    fusion_outer_step,
    init_fusion,
    run_fusion,
)
from blindsr.images import ImagePlane
from blindsr.patch_diffusion import PatchDenoiser, PDBackboneConfig
from blindsr.schedule import NoiseSchedule

from synthimg import textured_image


@pytest.fixture(scope="module")
def tiny_pd():
    torch.manual_seed(0)
    return PatchDenoiser(PDBackboneConfig(in_channels=1, hidden=16, emb_dim=32))


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.linear(T=50, beta_start=1e-4, beta_end=0.02)


def _lr_image(size=16, seed=3):
    # scale 2 puts the HR plane at 32x32, the smallest the 5-level refiner takes
    return ImagePlane(textured_image(size, size, seed=seed)[:, :, None])


def _cfg(**kw):
    base = dict(scale=2, t_nd=5, n_iter=2, n_iter_initial=3, kernel_size=5,
                seed=1)
    base.update(kw)
    return FusionConfig(**base)


def test_init_matches_bicubic_when_noise_free(tiny_pd):
    # nearly noise-free schedule: the initial sample is the bicubic upscale
    quiet = NoiseSchedule.linear(T=10, beta_start=1e-12, beta_end=1e-12)
    state = init_fusion(_lr_image(), tiny_pd, _cfg(t_nd=10), quiet)
    np.testing.assert_allclose(state.x.numpy(), state.x0_prev.numpy(),
                               atol=1e-4)


def test_init_residual_recorded(tiny_pd, sched):
    state = init_fusion(_lr_image(), tiny_pd, _cfg(), sched)
    assert np.isfinite(state.trace.initial_residual)
    assert state.trace.initial_residual > 0


def test_inner_step_updates_both_networks(tiny_pd, sched):
    state = init_fusion(_lr_image(), tiny_pd, _cfg(), sched)
    xi = torch.randn(state.x.shape, generator=state.gen)
    before_r = torch.cat([p.flatten() for p in state.refiner.parameters()]).clone()
    before_k = torch.cat([p.flatten() for p in state.inr.parameters()]).clone()
    loss = fusion_inner_step(state, xi)
    assert np.isfinite(loss)
    grads_r = [p.grad for p in state.refiner.parameters()]
    grads_k = [p.grad for p in state.inr.parameters()]
    assert any(g is not None and torch.any(g != 0) for g in grads_r)
    assert any(g is not None and torch.any(g != 0) for g in grads_k)
    after_r = torch.cat([p.flatten() for p in state.refiner.parameters()])
    after_k = torch.cat([p.flatten() for p in state.inr.parameters()])
    assert not torch.equal(before_r, after_r)
    assert not torch.equal(before_k, after_k)
    # denoiser is frozen
    assert all(not p.requires_grad for p in state.denoiser.parameters())


def test_outer_step_advances_and_traces(tiny_pd, sched):
    state = init_fusion(_lr_image(), tiny_pd, _cfg(), sched)
    fusion_outer_step(state)
    assert state.t == 4
    assert len(state.trace.steps) == 1
    rec = state.trace.steps[0]
    assert rec["t"] == 5
    assert rec["lr_final"] == pytest.approx(5e-5)
    # clean estimate is a tanh output
    assert float(state.x0_prev.min()) >= -1.0
    assert float(state.x0_prev.max()) <= 1.0


def test_one_noise_draw_per_outer_step(tiny_pd, sched):
    lr = _lr_image()
    state = init_fusion(lr, tiny_pd, _cfg(), sched)
    while state.t >= 1:
        fusion_outer_step(state)
    digests = [rec["xi_digest"] for rec in state.trace.steps]
    assert len(digests) == 5
    assert len(set(digests)) == 5  # fresh draw each outer step


def test_full_run_deterministic(tiny_pd, sched):
    lr = _lr_image()
    a = run_fusion(lr, tiny_pd, _cfg(seed=7), sched)
    b = run_fusion(lr, tiny_pd, _cfg(seed=7), sched)
    np.testing.assert_array_equal(a.image.pixels, b.image.pixels)
    np.testing.assert_array_equal(a.kernel.values, b.kernel.values)
    c = run_fusion(lr, tiny_pd, _cfg(seed=8), sched)
    assert not np.array_equal(a.image.pixels, c.image.pixels)


def test_final_image_is_refined_estimate(tiny_pd, sched):
    state = init_fusion(_lr_image(), tiny_pd, _cfg(), sched)
    while state.t >= 1:
        fusion_outer_step(state)
    # at t=1 the posterior collapses onto the refined clean estimate
    np.testing.assert_allclose(state.x.numpy(), state.x0_prev.numpy(),
                               atol=1e-6)


def test_run_output_contracts(tiny_pd, sched):
    lr = _lr_image()
    res = run_fusion(lr, tiny_pd, _cfg(snapshot_every=2), sched)
    assert res.image.range_tag == "unit"
    assert res.image.pixels.shape == (32, 32, 1)
    assert res.image.pixels.min() >= 0.0 and res.image.pixels.max() <= 1.0
    res.kernel.validate()
    assert res.kernel.shape == (5, 5)
    assert len(res.trace.steps) == 5
    assert len(res.trace.snapshots) == 2
    assert np.isfinite(res.trace.final_residual)


def test_gt_plugin_zeroes_consistency(sched):
    # with the true kernel and true HR, both data terms vanish
    hr = ImagePlane(textured_image(16, 16, seed=5)[:, :, None])
    k = filled_square(5, 3)
    lr = convolve_downsample(hr, k, 2)
    lr_t = torch.tensor(np.moveaxis(lr.to_signed().pixels, 2, 0)[None],
                        dtype=torch.float64)
    hr_t = torch.tensor(np.moveaxis(hr.to_signed().pixels, 2, 0)[None],
                        dtype=torch.float64)
    kt = torch.tensor(k.values, dtype=torch.float64)
    term_a, term_b = consistency_terms(lr_t, hr_t, hr_t, kt, 2)
    assert float(term_a) < 1e-4
    assert float(term_b) < 1e-4


def test_schedule_mismatch_rejected(tiny_pd, sched):
    meta = {"schedule_fingerprint": "deadbeef"}
    with pytest.raises(ValueError, match="schedule"):
        init_fusion(_lr_image(), tiny_pd, _cfg(), sched, denoiser_meta=meta)


def test_scale_mismatch_rejected(tiny_pd, sched):
    meta = {"schedule_fingerprint": sched.fingerprint(), "scale": 4}
    with pytest.raises(ValueError, match="scale"):
        init_fusion(_lr_image(), tiny_pd, _cfg(scale=2), sched,
                    denoiser_meta=meta)


def test_channel_mismatch_rejected(tiny_pd, sched):
    rgb = ImagePlane(np.random.default_rng(0).random((8, 8, 3)))
    with pytest.raises(ValueError, match="channels"):
        init_fusion(rgb, tiny_pd, _cfg(), sched)


def test_invalid_config_rejected(tiny_pd, sched):
    with pytest.raises(ValueError):
        init_fusion(_lr_image(), tiny_pd, _cfg(t_nd=51), sched)
    with pytest.raises(ValueError):
        init_fusion(_lr_image(), tiny_pd, _cfg(n_iter=0), sched)


def test_divergence_guard_carries_diagnostics(tiny_pd, sched):
    state = init_fusion(_lr_image(), tiny_pd, _cfg(), sched)
    state.lr_t = state.lr_t.clone()
    state.lr_t[0, 0, 0, 0] = float("nan")
    xi = torch.randn(state.x.shape, generator=state.gen)
    with pytest.raises(FusionDivergence) as exc:
        fusion_inner_step(state, xi)
    assert exc.value.t == 5
    assert exc.value.kernel is not None
    assert exc.value.trace is state.trace


def test_frozen_denoiser_untouched(tiny_pd, sched):
    pre = {k: v.clone() for k, v in tiny_pd.state_dict().items()}
    run_fusion(_lr_image(), tiny_pd, _cfg(), sched)
    for k, v in tiny_pd.state_dict().items():
        assert torch.equal(v, pre[k])
