"""Seeded synthetic test images with edges and texture at every scale."""

import numpy as np


def textured_image(h, w, seed=0):
    """(h, w) float64 in [0, 1]: gradient + sinusoids + random rectangles."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = 0.3 + 0.3 * (xx / max(w - 1, 1)) + 0.15 * (yy / max(h - 1, 1))
    fy, fx = rng.uniform(0.05, 0.4, size=2)
    img = img + 0.12 * np.sin(2 * np.pi * (fy * yy + fx * xx))
    for _ in range(6):
        y0 = rng.integers(0, max(h - 2, 1))
        x0 = rng.integers(0, max(w - 2, 1))
        hh = int(rng.integers(2, max(h // 3, 3)))
        ww = int(rng.integers(2, max(w // 3, 3)))
        img[y0:y0 + hh, x0:x0 + ww] += rng.uniform(-0.35, 0.35)
    img += rng.normal(0.0, 0.02, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def textured_rgb(h, w, seed=0):
    """(h, w, 3) stack of correlated textured planes."""
    base = textured_image(h, w, seed=seed)
    chans = [np.clip(base + textured_image(h, w, seed=seed + 1 + i) * 0.3 - 0.15,
                     0.0, 1.0) for i in range(3)]
    return np.stack(chans, axis=2)
