"""Degradation model: blur kernels, the blur+subsample operator, and synthesis.

The forward model is LR = (HR * k) downsampled by s, where * is mathematical
convolution (kernel flipped relative to cross-correlation), the HR image is
reflect-padded, and the subsample grid is {0, s, 2s, ...} with the kernel
anchor (h-1)//2, (w-1)//2 mapped onto each output sample. One implementation
(`_blur_downsample` on torch tensors) backs the dataset synthesis, the fusion
consistency loss and the baselines, so estimates are judged by exactly the
operator that produced the data.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .images import ImagePlane, center_crop_to_multiple, read_png, write_png

KERNEL_SUM_TOL = 1e-6
KERNEL_FLOOR = -1e-4  # most negative admissible weight (estimated kernels)


# =============================================================================
# Kernel container and text I/O
# =============================================================================


@dataclasses.dataclass
class Kernel:
    """A 2-D blur kernel, float64, unit sum within KERNEL_SUM_TOL."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"kernel must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite kernel values")
        self.values = v

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def validate(self) -> None:
        s = float(self.values.sum())
        if abs(s - 1.0) > KERNEL_SUM_TOL:
            raise ValueError(f"kernel sum {s} deviates from 1 by more than "
                             f"{KERNEL_SUM_TOL}")
        mn = float(self.values.min())
        if mn < KERNEL_FLOOR:
            raise ValueError(f"kernel weight {mn} below floor {KERNEL_FLOOR}")

    def centroid(self) -> tuple[float, float]:
        """Intensity centroid (row, col) in pixel units."""
        h, w = self.values.shape
        mass = float(self.values.sum())
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cy = float((self.values * ii).sum() / mass)
        cx = float((self.values * jj).sum() / mass)
        return cy, cx


def normalize_kernel(values: np.ndarray) -> Kernel:
    """Scale to unit sum. Raises if the mass is not positive."""
    v = np.asarray(values, dtype=np.float64)
    s = float(v.sum())
    if s <= 0.0:
        raise ValueError(f"kernel mass must be positive, got {s}")
    return Kernel(v / s)


def write_kernel_txt(k: Kernel, path) -> None:
    """Plain-text kernel: first line "h w", then h rows of w floats (%.17g)."""
    h, w = k.shape
    lines = [f"{h} {w}"]
    for row in k.values:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_kernel_txt(path) -> Kernel:
    text = Path(path).read_text().strip().splitlines()
    h, w = (int(v) for v in text[0].split())
    if len(text) != h + 1:
        raise ValueError(f"{path}: expected {h} rows, got {len(text) - 1}")
    rows = [np.array([float(v) for v in line.split()]) for line in text[1:]]
    vals = np.stack(rows)
    if vals.shape != (h, w):
        raise ValueError(f"{path}: header says {h}x{w}, data is {vals.shape}")
    return Kernel(vals)


# =============================================================================
# Blur + subsample operator
# =============================================================================


def kernel_anchor(h: int, w: int) -> tuple[int, int]:
    """Kernel index that lands on each output sample: ((h-1)//2, (w-1)//2)."""
    return (h - 1) // 2, (w - 1) // 2


def _blur_downsample(x: torch.Tensor, k: torch.Tensor, s: int) -> torch.Tensor:
    """Convolve each channel with k (true convolution, reflect pad) then take
    every s-th pixel starting at (0, 0).

    Args:
        x: (B, C, H, W) tensor, H and W multiples of s and >= kernel dims.
        k: (h, w) tensor, same dtype as x.
        s: integer subsample factor >= 1.

    Returns:
        (B, C, H//s, W//s) tensor. Differentiable in x and k. No range clamp.
    """
    if x.dim() != 4:
        raise ValueError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    h, w = k.shape
    hh, ww = x.shape[2], x.shape[3]
    if hh % s or ww % s:
        raise ValueError(f"image {hh}x{ww} not a multiple of s={s}")
    if hh < h or ww < w:
        raise ValueError(f"image {hh}x{ww} smaller than kernel {h}x{w}")
    cy, cx = kernel_anchor(h, w)
    # flip -> cross-correlation equals convolution anchored at (cy, cx)
    kf = torch.flip(k, dims=(0, 1))
    pad = (w - 1 - cx, cx, h - 1 - cy, cy)  # left, right, top, bottom
    xp = F.pad(x, pad, mode="reflect")
    c = x.shape[1]
    weight = kf.reshape(1, 1, h, w).expand(c, 1, h, w)
    out = F.conv2d(xp, weight, groups=c)
    return out[:, :, ::s, ::s]


def blur_downsample(x: torch.Tensor, k: torch.Tensor, s: int) -> torch.Tensor:
    """Torch entry point used inside optimization loops (see `_blur_downsample`)."""
    return _blur_downsample(x, k, int(s))


def convolve_downsample(img: ImagePlane, k: Kernel, s: int) -> ImagePlane:
    """Apply the degradation operator to an ImagePlane (float64, any range tag).

    Returns an ImagePlane with the same range tag; values are not clamped, so
    near-boundary overshoot from negative kernel lobes is preserved.
    """
    x = torch.from_numpy(np.moveaxis(img.pixels, 2, 0)[None])  # float64
    kt = torch.from_numpy(k.values)
    out = _blur_downsample(x, kt, int(s))
    px = np.moveaxis(out[0].numpy(), 0, 2)
    return ImagePlane(px, img.range_tag)


# =============================================================================
# Kernel generators
# =============================================================================


def _grid_center(canvas: int) -> float:
    return (canvas - 1) / 2.0


def anisotropic_gaussian(canvas: int, sigma_x: float, sigma_y: float,
                         theta: float) -> Kernel:
    """Rotated anisotropic Gaussian evaluated on the canvas grid, unit sum.

    Args:
        canvas: side length of the square canvas.
        sigma_x, sigma_y: principal-axis standard deviations in pixels.
        theta: rotation of the x-axis, radians, counter-clockwise.
    """
    if min(sigma_x, sigma_y) <= 0:
        raise ValueError("sigmas must be positive")
    c = _grid_center(canvas)
    ii, jj = np.meshgrid(np.arange(canvas) - c, np.arange(canvas) - c,
                         indexing="ij")
    ct, st = math.cos(theta), math.sin(theta)
    # coordinates in the rotated frame; j is x, i is y
    u = ct * jj + st * ii
    v = -st * jj + ct * ii
    vals = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return normalize_kernel(vals)


def delta(canvas: int, offset: tuple[int, int] = (0, 0)) -> Kernel:
    """Single unit weight at anchor + offset (dy, dx)."""
    cy, cx = kernel_anchor(canvas, canvas)
    dy, dx = int(offset[0]), int(offset[1])
    y, x = cy + dy, cx + dx
    if not (0 <= y < canvas and 0 <= x < canvas):
        raise ValueError(f"delta offset {offset} leaves the {canvas}x{canvas} canvas")
    vals = np.zeros((canvas, canvas))
    vals[y, x] = 1.0
    return Kernel(vals)


def filled_square(canvas: int, side: int) -> Kernel:
    """Centered side x side block of equal weights."""
    if not 0 < side <= canvas:
        raise ValueError(f"side {side} does not fit canvas {canvas}")
    top = (canvas - side) // 2
    vals = np.zeros((canvas, canvas))
    vals[top : top + side, top : top + side] = 1.0
    return normalize_kernel(vals)


def empty_square(canvas: int, side: int, border: int = 1) -> Kernel:
    """Centered square ring: a filled square minus its interior."""
    if side <= 2 * border:
        raise ValueError(f"side {side} too small for border {border}")
    outer = filled_square(canvas, side).values > 0
    inner = np.zeros_like(outer)
    top = (canvas - side) // 2 + border
    inner[top : top + side - 2 * border, top : top + side - 2 * border] = True
    return normalize_kernel((outer & ~inner).astype(np.float64))


def l_shape(canvas: int, arm: int, thickness: int = 2) -> Kernel:
    """L of two equal arms (vertical + horizontal bar), bounding box centered."""
    if arm <= thickness or arm > canvas:
        raise ValueError(f"need thickness < arm <= canvas, got {thickness}, {arm}")
    box = np.zeros((arm, arm))
    box[:, :thickness] = 1.0        # vertical arm
    box[-thickness:, :] = 1.0       # horizontal arm
    top = (canvas - arm) // 2
    vals = np.zeros((canvas, canvas))
    vals[top : top + arm, top : top + arm] = box
    return normalize_kernel(vals)


def _bilinear_resize(vals: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned separable bilinear resize (for measured kernels)."""
    h, w = vals.shape
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros(out_h, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros(out_w, int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = vals[y0][:, x0]
    b = vals[y0][:, np.minimum(x0 + 1, w - 1)]
    c = vals[np.minimum(y0 + 1, h - 1)][:, x0]
    d = vals[np.minimum(y0 + 1, h - 1)][:, np.minimum(x0 + 1, w - 1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def measured_file(path, canvas: int) -> Kernel:
    """Load a kernel file and resize it to the canvas, renormalized."""
    k = read_kernel_txt(path)
    vals = _bilinear_resize(k.values, canvas, canvas)
    return normalize_kernel(np.maximum(vals, 0.0))


_GENERATORS = {
    "anisotropic_gaussian": anisotropic_gaussian,
    "measured_file": measured_file,
    "l_shape": l_shape,
    "filled_square": filled_square,
    "empty_square": empty_square,
    "delta": delta,
}


@dataclasses.dataclass
class KernelBankEntry:
    kernel_id: str
    generator: str
    params: dict

    def make(self) -> Kernel:
        if self.generator not in _GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        return _GENERATORS[self.generator](**self.params)


def gaussian_bank(n: int, canvas: int, seed: int,
                  sigma_range: tuple[float, float] = (0.6, 5.0)) -> list[KernelBankEntry]:
    """n random anisotropic Gaussians with seeded sigmas and rotation."""
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        sx, sy = rng.uniform(*sigma_range, size=2)
        th = rng.uniform(0.0, math.pi)
        entries.append(KernelBankEntry(
            kernel_id=f"gauss{i:02d}",
            generator="anisotropic_gaussian",
            params={"canvas": canvas, "sigma_x": round(float(sx), 4),
                    "sigma_y": round(float(sy), 4), "theta": round(float(th), 4)},
        ))
    return entries


def default_bank(canvas: int = 24, seed: int = 0) -> list[KernelBankEntry]:
    """12-kernel bank: 8 random Gaussians plus 4 structured stress kernels."""
    entries = gaussian_bank(8, canvas, seed)
    entries += [
        KernelBankEntry("lshape", "l_shape",
                        {"canvas": canvas, "arm": max(5, canvas // 2),
                         "thickness": 2}),
        KernelBankEntry("square", "filled_square",
                        {"canvas": canvas, "side": max(3, canvas // 4)}),
        KernelBankEntry("ring", "empty_square",
                        {"canvas": canvas, "side": max(5, canvas // 3),
                         "border": 1}),
        KernelBankEntry("delta", "delta", {"canvas": canvas}),
    ]
    return entries


# =============================================================================
# Dataset synthesis
# =============================================================================


@dataclasses.dataclass
class ManifestRecord:
    lr_path: str
    hr_path: str
    kernel_id: str
    kernel_path: str
    scale: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    for line in Path(path).read_text().strip().splitlines():
        d = json.loads(line)
        records.append(ManifestRecord(**d))
    return records


def synthesize_dataset(hr_paths, out_dir, bank, scale: int, pairing: str,
                       seed: int = 0) -> list[ManifestRecord]:
    """Degrade HR images with a kernel bank and write a traceable dataset.

    Args:
        hr_paths: iterable of HR image paths (PNG), processed in sorted order.
        out_dir: output root; hr/, lr/, kernels/ and manifest.jsonl are created.
        bank: list of KernelBankEntry.
        scale: integer subsample factor.
        pairing: "random_per_image" (one seeded kernel per image) or
            "full_matrix" (every image x every kernel).
        seed: drives the random pairing; recorded in every manifest row.

    Returns:
        the manifest records, in the order written.
    """
    if pairing not in ("random_per_image", "full_matrix"):
        raise ValueError(f"unknown pairing {pairing!r}")
    out = Path(out_dir)
    for sub in ("hr", "lr", "kernels"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    kernels = {}
    for entry in bank:
        k = entry.make()
        k.validate()
        kernels[entry.kernel_id] = k
        write_kernel_txt(k, out / "kernels" / f"{entry.kernel_id}.txt")

    rng = np.random.default_rng(seed)
    ids = [e.kernel_id for e in bank]
    records = []
    for hr_path in sorted(str(p) for p in hr_paths):
        stem = Path(hr_path).stem
        hr = center_crop_to_multiple(read_png(hr_path), scale)
        hr_out = out / "hr" / f"{stem}.png"
        write_png(hr, hr_out)
        if pairing == "random_per_image":
            chosen = [ids[rng.integers(len(ids))]]
        else:
            chosen = ids
        for kid in chosen:
            lr = convolve_downsample(hr, kernels[kid], scale).clamped()
            lr_out = out / "lr" / f"{stem}__{kid}.png"
            write_png(lr, lr_out)
            records.append(ManifestRecord(
                lr_path=str(lr_out), hr_path=str(hr_out), kernel_id=kid,
                kernel_path=str(out / "kernels" / f"{kid}.txt"),
                scale=int(scale), seed=int(seed)))

    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(r.to_json() + "\n" for r in records))
    return records
