"""Metrics, reference baselines and report emission.

PSNR/SSIM follow the classical single-image SR protocol: scores are computed
on the luminance channel (BT.601 weights) after excluding a border of 5% of
each dimension (ceil, per side). The pseudo-inverse backprojection baseline
sharpens a bicubic upscale toward LR consistency using a truncated
frequency-domain inverse of the blur kernel as the correction filter.
"""

import csv
import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from .degradation import (
    Kernel,
    blur_downsample,
    kernel_anchor,
    read_kernel_txt,
    read_manifest,
)
from .images import ImagePlane, bicubic_upscale, read_png, write_png, y_channel

__all__ = [
    "psnr_y", "ssim_y", "bicubic_upscale", "pinv_backproject",
    "kernel_similarity", "EvalReport", "evaluate_directory", "emit_panels",
]

PSNR_CAP_DB = 99.0
PINV_SV_THRESHOLD = 1e-3      # singular values below this fraction of max: zeroed
BORDER_FRACTION = 0.05


# =============================================================================
# Metrics
# =============================================================================


def _cropped_luma(pred: ImagePlane, gt: ImagePlane, border_fraction: float):
    if pred.pixels.shape != gt.pixels.shape:
        raise ValueError(f"shape mismatch: {pred.pixels.shape} vs "
                         f"{gt.pixels.shape}")
    yp, yg = y_channel(pred), y_channel(gt)
    h, w = yp.shape
    by = math.ceil(border_fraction * h)
    bx = math.ceil(border_fraction * w)
    if h - 2 * by < 1 or w - 2 * bx < 1:
        raise ValueError(f"border {border_fraction} leaves no pixels on "
                         f"{h}x{w}")
    return yp[by:h - by, bx:w - bx], yg[by:h - by, bx:w - bx]


def psnr_y(pred: ImagePlane, gt: ImagePlane,
           border_fraction: float = BORDER_FRACTION) -> float:
    """Luminance PSNR in dB over the border-cropped region, capped at 99."""
    yp, yg = _cropped_luma(pred, gt, border_fraction)
    mse = float(np.mean((yp - yg) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _ssim_window() -> np.ndarray:
    r = np.arange(11) - 5.0
    g = np.exp(-(r ** 2) / (2.0 * 1.5 ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_y(pred: ImagePlane, gt: ImagePlane,
           border_fraction: float = BORDER_FRACTION) -> float:
    """Mean SSIM over valid 11x11 windows of the border-cropped luma pair."""
    yp, yg = _cropped_luma(pred, gt, border_fraction)
    if min(yp.shape) < 11:
        raise ValueError(f"cropped region {yp.shape} smaller than the 11x11 "
                         "window")
    w = _ssim_window()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu1 = convolve2d(yp, w, mode="valid")
    mu2 = convolve2d(yg, w, mode="valid")
    s11 = convolve2d(yp * yp, w, mode="valid") - mu1 ** 2
    s22 = convolve2d(yg * yg, w, mode="valid") - mu2 ** 2
    s12 = convolve2d(yp * yg, w, mode="valid") - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 ** 2 + mu2 ** 2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


# =============================================================================
# Pseudo-inverse backprojection baseline
# =============================================================================


class _PinvOperator:
    """Truncated pseudo-inverse of the circular blur-then-subsample operator.

    The blur applies weight k[i, j] at displacement (i - cy, j - cx), so
    embedding the kernel with its anchor at the origin (wrapped) gives its
    transfer function on the HR grid. Under the circular model the composite
    degradation is diagonal across LR-frequency alias classes with Gram
    spectrum g = mean of |OTF|^2 over the s*s replicas of each class, i.e.
    squared singular values. apply() divides the residual spectrum by g where
    the singular value stays above PINV_SV_THRESHOLD of the max (zeroing the
    rest), zero-stuffs, and applies the adjoint blur: exactly the
    Moore-Penrose inverse of the truncated operator, so the correction never
    contains unobservable (null-space) components.
    """

    def __init__(self, k: Kernel, hr_shape: tuple[int, int], s: int):
        H, W = hr_shape
        h, w = k.shape
        if h > H or w > W:
            raise ValueError(f"kernel {h}x{w} larger than image {H}x{W}")
        cy, cx = kernel_anchor(h, w)
        psf = np.zeros((H, W))
        psf[:h, :w] = k.values
        psf = np.roll(psf, (-cy, -cx), axis=(0, 1))
        self.otf = np.fft.fft2(psf)
        self.s = s
        g = (np.abs(self.otf) ** 2).reshape(s, H // s, s, W // s)
        g = g.sum(axis=(0, 2)) / (s * s)
        sv = np.sqrt(g)
        keep = sv >= PINV_SV_THRESHOLD * sv.max()
        self.inv_g = np.zeros_like(g)
        self.inv_g[keep] = 1.0 / g[keep]

    def apply(self, r: np.ndarray) -> np.ndarray:
        """LR residual (h, w) -> HR correction (H, W)."""
        q = np.fft.ifft2(np.fft.fft2(r) * self.inv_g).real
        zs = np.zeros(self.otf.shape)
        zs[::self.s, ::self.s] = q
        return np.fft.ifft2(np.fft.fft2(zs) * np.conj(self.otf)).real


def _degrade(x: np.ndarray, k: Kernel, s: int) -> np.ndarray:
    # (H, W, C) float64 -> (h, w, C), exact same operator as synthesis
    t = torch.from_numpy(np.moveaxis(x, 2, 0)[None])
    kt = torch.from_numpy(k.values)
    out = blur_downsample(t, kt, s)
    return np.moveaxis(out[0].numpy(), 0, 2)


def pinv_backproject(lr: ImagePlane, k: Kernel, s: int,
                     iters: int = 10) -> ImagePlane:
    """Iterative backprojection from a bicubic start.

    Each iteration maps the LR residual through the truncated pseudo-inverse
    of the kernel's degradation operator and takes the step size that
    minimizes the next LR residual in closed form, so the residual norm is
    non-increasing under the true (reflect-boundary) operator. A guard
    returns the best iterate if the norm still grows three times in a row
    (numerical edge cases only). iters=0 returns the bicubic upscale.
    """
    k.validate()
    start = bicubic_upscale(lr.to_unit(), s)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if iters == 0:
        return start

    lr_arr = lr.to_unit().pixels
    x = start.pixels.copy()
    H, W, _ = x.shape
    op = _PinvOperator(k, (H, W), s)

    best_x, best_norm = x.copy(), math.inf
    grow_streak, prev_norm = 0, math.inf
    for _ in range(iters):
        r = lr_arr - _degrade(x, k, s)
        norm = float(np.sqrt((r ** 2).sum()))
        if norm < best_norm:
            best_x, best_norm = x.copy(), norm
        if norm > prev_norm:
            grow_streak += 1
            if grow_streak >= 3:
                break
        else:
            grow_streak = 0
        prev_norm = norm
        if norm < 1e-12:
            break

        corr = np.stack([op.apply(r[:, :, c]) for c in range(x.shape[2])],
                        axis=2)
        a_corr = _degrade(corr, k, s)
        denom = float((a_corr ** 2).sum())
        if denom < 1e-30:
            break
        alpha = float((r * a_corr).sum()) / denom
        x = x + alpha * corr

    r = lr_arr - _degrade(x, k, s)
    if float(np.sqrt((r ** 2).sum())) < best_norm:
        best_x = x
    return ImagePlane(np.clip(best_x, 0.0, 1.0))


# =============================================================================
# Kernel similarity
# =============================================================================


def _embed_centered(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Center-place (crop or pad) a kernel array onto the given canvas."""
    out = np.zeros(shape)
    h, w = values.shape
    dy, dx = (shape[0] - h) // 2, (shape[1] - w) // 2
    sy, sx = max(0, -dy), max(0, -dx)
    ty, tx = max(0, dy), max(0, dx)
    ch = min(h - sy, shape[0] - ty)
    cw = min(w - sx, shape[1] - tx)
    out[ty:ty + ch, tx:tx + cw] = values[sy:sy + ch, sx:sx + cw]
    return out


def kernel_similarity(k_est: Kernel, k_gt: Kernel) -> tuple[float, float]:
    """(per-weight MSE after centroid alignment, centroid distance in px).

    The centroid distance is measured before alignment, relative to each
    canvas center so kernels on different canvas sizes stay comparable. For
    alignment the estimate is embedded on the GT canvas and rolled by the
    rounded centroid difference.
    """
    k_est.validate()
    k_gt.validate()
    ey, ex = k_est.centroid()
    gy, gx = k_gt.centroid()
    eh, ew = k_est.shape
    gh, gw = k_gt.shape
    rel_e = (ey - (eh - 1) / 2.0, ex - (ew - 1) / 2.0)
    rel_g = (gy - (gh - 1) / 2.0, gx - (gw - 1) / 2.0)
    centroid_err = math.hypot(rel_e[0] - rel_g[0], rel_e[1] - rel_g[1])

    est = _embed_centered(k_est.values, (gh, gw))
    shift = (round(rel_g[0] - rel_e[0]), round(rel_g[1] - rel_e[1]))
    est = np.roll(est, shift, axis=(0, 1))
    mse = float(np.mean((est - k_gt.values) ** 2))
    return mse, centroid_err


# =============================================================================
# Reports
# =============================================================================


@dataclasses.dataclass
class EvalReport:
    """Per-image records plus the protocol they were computed under."""

    border_fraction: float = BORDER_FRACTION
    luminance: str = "bt601"
    per_image: list = dataclasses.field(default_factory=list)

    CSV_FIELDS = ("image_id", "kernel_id", "method", "psnr_db", "ssim",
                  "kernel_mse", "centroid_err")

    def add(self, image_id, kernel_id, method, psnr_db, ssim,
            kernel_mse=None, centroid_err=None) -> None:
        self.per_image.append({
            "image_id": image_id, "kernel_id": kernel_id, "method": method,
            "psnr_db": float(psnr_db), "ssim": float(ssim),
            "kernel_mse": None if kernel_mse is None else float(kernel_mse),
            "centroid_err": (None if centroid_err is None
                             else float(centroid_err)),
        })

    def aggregates(self) -> dict:
        """Arithmetic means per method."""
        by_method = {}
        for rec in self.per_image:
            by_method.setdefault(rec["method"], []).append(rec)
        out = {}
        for method, recs in sorted(by_method.items()):
            out[method] = {
                "count": len(recs),
                "psnr_db": float(np.mean([r["psnr_db"] for r in recs])),
                "ssim": float(np.mean([r["ssim"] for r in recs])),
            }
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS)
            writer.writeheader()
            for rec in self.per_image:
                row = dict(rec)
                for key in ("kernel_mse", "centroid_err"):
                    if row[key] is None:
                        row[key] = ""
                writer.writerow(row)

    def table(self) -> str:
        lines = [f"protocol: luma={self.luminance} "
                 f"border_fraction={self.border_fraction}",
                 f"{'method':<16} {'n':>4} {'psnr_db':>9} {'ssim':>7}"]
        for method, agg in self.aggregates().items():
            lines.append(f"{method:<16} {agg['count']:>4} "
                         f"{agg['psnr_db']:>9.3f} {agg['ssim']:>7.4f}")
        return "\n".join(lines)


def evaluate_directory(manifest_path, outputs_dir,
                       border_fraction: float = BORDER_FRACTION) -> EvalReport:
    """Score every method output found next to a synthesis manifest.

    For each manifest row, files named `<lr_stem>_<method>.png` in outputs_dir
    are compared against the row's HR image; a `<lr_stem>_<method>_kernel.txt`
    alongside is scored against the GT kernel.
    """
    outputs = Path(outputs_dir)
    report = EvalReport(border_fraction=border_fraction)
    for rec in read_manifest(manifest_path):
        stem = Path(rec.lr_path).stem
        gt = read_png(rec.hr_path)
        k_gt = read_kernel_txt(rec.kernel_path)
        for path in sorted(outputs.glob(f"{stem}_*.png")):
            method = path.stem[len(stem) + 1:]
            if method.endswith("_kernel"):
                continue
            pred = read_png(path)
            kernel_mse = centroid_err = None
            kpath = outputs / f"{stem}_{method}_kernel.txt"
            if kpath.exists():
                kernel_mse, centroid_err = kernel_similarity(
                    read_kernel_txt(kpath), k_gt)
            report.add(Path(rec.hr_path).stem, rec.kernel_id, method,
                       psnr_y(pred, gt, border_fraction),
                       ssim_y(pred, gt, border_fraction),
                       kernel_mse, centroid_err)
    return report


# =============================================================================
# Panels
# =============================================================================


def _norm_tile(values: np.ndarray, zoom: int = 8) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    tile = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    return np.kron(tile, np.ones((zoom, zoom)))


def _grid(tiles: list, pad: int = 2) -> np.ndarray:
    h = max(t.shape[0] for t in tiles)
    w = max(t.shape[1] for t in tiles)
    cells = []
    for t in tiles:
        cell = np.ones((h, w))
        cell[:t.shape[0], :t.shape[1]] = t
        cells.append(cell)
        cells.append(np.ones((h, pad)))
    return np.concatenate(cells[:-1], axis=1)


def emit_panels(report: EvalReport, assets: dict, out_dir) -> list:
    """Write the kernel grid, SR strips and report files; returns the paths.

    assets["kernels"]: list of (kernel_id, gt Kernel, est Kernel or None);
    assets["strips"]: list of (image_id, [(label, ImagePlane), ...]).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    kernels = assets.get("kernels", [])
    if kernels:
        top = _grid([_norm_tile(k_gt.values) for _, k_gt, _ in kernels])
        bottom = _grid([_norm_tile(k_est.values) if k_est is not None
                        else np.zeros_like(_norm_tile(k_gt.values))
                        for _, k_gt, k_est in kernels])
        w = max(top.shape[1], bottom.shape[1])
        rows = []
        for band in (top, bottom):
            padded = np.ones((band.shape[0], w))
            padded[:, :band.shape[1]] = band
            rows.extend([padded, np.ones((2, w))])
        grid = np.concatenate(rows[:-1], axis=0)
        path = out / "kernels.png"
        write_png(ImagePlane(grid[:, :, None]), path)
        written.append(path)

    for image_id, panels in assets.get("strips", []):
        chans = max(img.channels for _, img in panels)
        tiles = []
        for _, img in panels:
            px = img.to_unit().pixels
            if px.shape[2] == 1 and chans == 3:
                px = np.repeat(px, 3, axis=2)
            tiles.append(px)
        h = max(t.shape[0] for t in tiles)
        cells = []
        for t in tiles:
            cell = np.ones((h, t.shape[1], chans))
            cell[:t.shape[0]] = t
            cells.append(cell)
            cells.append(np.ones((h, 2, chans)))
        strip = np.concatenate(cells[:-1], axis=1)
        path = out / f"strip_{image_id}.png"
        write_png(ImagePlane(strip), path)
        written.append(path)

    csv_path = out / "report.csv"
    report.to_csv(csv_path)
    txt_path = out / "report.txt"
    txt_path.write_text(report.table() + "\n")
    written.extend([csv_path, txt_path])
    return written
