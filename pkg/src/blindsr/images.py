"""Image containers, range conversions, PNG I/O and bicubic upscaling.

Images are carried as float64 numpy arrays of shape (H, W, C) with C in {1, 3},
together with an explicit range tag: "unit" for [0, 1] (file I/O, degradation,
evaluation) or "signed" for [-1, 1] (diffusion-side code). All conversions
between the two ranges go through `to_unit` / `to_signed` so that no module
guesses the convention.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from PIL import Image

UNIT = "unit"
SIGNED = "signed"

_VALID_TAGS = (UNIT, SIGNED)


@dataclasses.dataclass
class ImagePlane:
    """A float image plus the value-range convention its pixels follow.

    pixels: (H, W, C) float64, C in {1, 3}.
    range_tag: "unit" ([0, 1]) or "signed" ([-1, 1]).
    """

    pixels: np.ndarray
    range_tag: str = UNIT

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, C) with C in {{1, 3}}, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("non-finite pixel values")
        if self.range_tag not in _VALID_TAGS:
            raise ValueError(f"unknown range_tag {self.range_tag!r}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_unit(self) -> "ImagePlane":
        if self.range_tag == UNIT:
            return self
        return ImagePlane((self.pixels + 1.0) / 2.0, UNIT)

    def to_signed(self) -> "ImagePlane":
        if self.range_tag == SIGNED:
            return self
        return ImagePlane(2.0 * self.pixels - 1.0, SIGNED)

    def clamped(self) -> "ImagePlane":
        lo, hi = (0.0, 1.0) if self.range_tag == UNIT else (-1.0, 1.0)
        return ImagePlane(np.clip(self.pixels, lo, hi), self.range_tag)

    def validate_range(self, tol: float = 1e-6) -> None:
        """Assert pixels lie within the declared range (tolerance for roundoff)."""
        lo, hi = (0.0, 1.0) if self.range_tag == UNIT else (-1.0, 1.0)
        mn, mx = float(self.pixels.min()), float(self.pixels.max())
        if mn < lo - tol or mx > hi + tol:
            raise ValueError(
                f"pixels outside {self.range_tag} range: [{mn:.6g}, {mx:.6g}]"
            )


def read_png(path) -> ImagePlane:
    """Load an 8-bit grayscale or RGB PNG as a unit-range ImagePlane."""
    im = Image.open(path)
    if im.mode == "L":
        arr = np.asarray(im, dtype=np.float64)[:, :, None]
    else:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return ImagePlane(arr / 255.0, UNIT)


def write_png(img: ImagePlane, path) -> None:
    """Write a unit-range ImagePlane as an 8-bit PNG (values clipped, rounded)."""
    if img.range_tag != UNIT:
        raise ValueError("write_png expects a unit-range image")
    arr = np.clip(np.round(img.pixels * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def y_channel(img: ImagePlane) -> np.ndarray:
    """Full-range luma (H, W): 0.299 R + 0.587 G + 0.114 B, identity for C=1."""
    img = img.to_unit()
    px = img.pixels
    if px.shape[2] == 1:
        return px[:, :, 0]
    return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]


def center_crop_to_multiple(img: ImagePlane, s: int) -> ImagePlane:
    """Center-crop so both spatial dims are multiples of s."""
    h, w = img.height, img.width
    nh, nw = (h // s) * s, (w // s) * s
    if nh == 0 or nw == 0:
        raise ValueError(f"image {h}x{w} smaller than factor {s}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return ImagePlane(img.pixels[top : top + nh, left : left + nw], img.range_tag)


# --- bicubic upscaling (Keys a = -0.5) ---------------------------------------


def _keys_weight(d: np.ndarray, a: float = -0.5) -> np.ndarray:
    d = np.abs(d)
    w = np.where(
        d <= 1.0,
        (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0,
        np.where(d < 2.0, a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a, 0.0),
    )
    return w


def _upscale_axis(px: np.ndarray, s: int) -> np.ndarray:
    # Origin-aligned sampling: output y reads input at y/s, so output index s*m
    # hits input sample m exactly and upscaling inverts subsampling at phase
    # {0, s, 2s, ...}. Edge taps are clamped (replicate).
    n = px.shape[0]
    src = np.arange(n * s, dtype=np.float64) / s
    i0 = np.floor(src).astype(np.int64)
    f = src - i0
    out = np.zeros((n * s,) + px.shape[1:], dtype=np.float64)
    for k in range(-1, 3):
        idx = np.clip(i0 + k, 0, n - 1)
        w = _keys_weight(f - k)
        out += w.reshape((-1,) + (1,) * (px.ndim - 1)) * px[idx]
    return out


def bicubic_upscale(img: ImagePlane, s: int) -> ImagePlane:
    """Upscale by an integer factor with separable Keys cubic interpolation.

    a = -0.5, no antialiasing, origin-aligned phase (see `_upscale_axis`).
    Output is clipped back to the declared range (cubic overshoot).

    Args:
        img: input image, either range tag.
        s: integer upscale factor >= 1.

    Returns:
        ImagePlane of shape (s*H, s*W, C) with the same range tag.
    """
    if s < 1 or int(s) != s:
        raise ValueError(f"scale must be a positive integer, got {s}")
    s = int(s)
    if s == 1:
        return ImagePlane(img.pixels.copy(), img.range_tag)
    out = _upscale_axis(img.pixels, s)
    out = np.moveaxis(_upscale_axis(np.moveaxis(out, 1, 0), s), 0, 1)
    lo, hi = (0.0, 1.0) if img.range_tag == UNIT else (-1.0, 1.0)
    return ImagePlane(np.clip(out, lo, hi), img.range_tag)
