"""Implicit neural representation of the blur kernel.

A small sinusoidal MLP maps 2-D canvas coordinates in [-1, 1] to one weight per
pixel. The output head is a "leaky sigmoid", (1 + 1e-4) * sigmoid(x) - 1e-4,
which keeps weights in (-1e-4, 1): effectively non-negative but with enough
slack below zero that gradients never die at the floor. The raw field is NOT
normalized; the consistency loss sees it as-is, and `export_kernel` produces
the clamped, unit-sum kernel only at the end.
"""

from __future__ import annotations

import dataclasses
import math
import warnings

import numpy as np
import torch
from torch import nn

from .degradation import Kernel

LEAK = 1e-4


def leaky_sigmoid(x):
    """(1 + 1e-4) * sigmoid(x) - 1e-4, range (-1e-4, 1). numpy or torch."""
    if torch.is_tensor(x):
        return (1.0 + LEAK) * torch.sigmoid(x) - LEAK
    from scipy.special import expit

    return (1.0 + LEAK) * expit(x) - LEAK


@dataclasses.dataclass
class INRConfig:
    canvas: tuple[int, int] = (24, 24)
    width: int = 256
    layers: int = 5           # total Linear layers, last one feeds the head
    omega: float = 5.0        # sine frequency, applied at every hidden layer


def coordinate_grid(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """Row-major (h*w, 2) grid of (y, x) coordinates spanning [-1, 1]^2."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([yy.reshape(-1), xx.reshape(-1)], dim=1)


class KernelINR(nn.Module):
    """Sinusoidal coordinate MLP with a leaky-sigmoid head.

    forward(coords) takes (N, 2) coordinates and returns (N,) weights in
    (-1e-4, 1). `kernel()` evaluates the full canvas and reshapes to (h, w).
    """

    def __init__(self, cfg: INRConfig | None = None, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg or INRConfig()
        if self.cfg.layers < 2:
            raise ValueError("need at least an input and an output layer")
        self.omega = float(self.cfg.omega)
        width = self.cfg.width
        dims = [2] + [width] * (self.cfg.layers - 1) + [1]
        self.linears = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )
        self._init_weights()
        if dtype is not torch.float32:
            self.to(dtype)
        grid = coordinate_grid(*self.cfg.canvas, dtype=dtype)
        self.register_buffer("grid", grid)

    def _init_weights(self):
        with torch.no_grad():
            first = self.linears[0]
            first.weight.uniform_(-1.0 / first.in_features,
                                  1.0 / first.in_features)
            for lin in self.linears[1:]:
                bound = math.sqrt(6.0 / lin.in_features) / self.omega
                lin.weight.uniform_(-bound, bound)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        h = coords
        for lin in self.linears[:-1]:
            h = torch.sin(self.omega * lin(h))
        return leaky_sigmoid(self.linears[-1](h)).squeeze(-1)

    def kernel(self) -> torch.Tensor:
        """Raw kernel field on the configured canvas, shape (h, w)."""
        return self.forward(self.grid).reshape(self.cfg.canvas)


def com_penalty(k: torch.Tensor, weight: float = 1.0) -> torch.Tensor:
    """weight * squared distance (pixels) between mass centroid and canvas center.

    Differentiable in k. A kernel with no positive mass has no centroid; that
    degenerate case returns 0 with a warning rather than NaN.
    """
    h, w = k.shape
    mass = k.sum()
    if float(mass.detach()) <= 1e-12:
        warnings.warn("kernel mass is not positive; center-of-mass penalty "
                      "treated as 0", RuntimeWarning)
        return k.sum() * 0.0
    ii = torch.arange(h, dtype=k.dtype, device=k.device)
    jj = torch.arange(w, dtype=k.dtype, device=k.device)
    cy = (k.sum(dim=1) * ii).sum() / mass
    cx = (k.sum(dim=0) * jj).sum() / mass
    ty, tx = (h - 1) / 2.0, (w - 1) / 2.0
    return weight * ((cy - ty) ** 2 + (cx - tx) ** 2)


def export_kernel(k: torch.Tensor) -> Kernel:
    """Final kernel: negatives clamped to zero, renormalized to unit sum."""
    vals = np.maximum(k.detach().cpu().double().numpy(), 0.0)
    total = vals.sum()
    if total <= 0.0:
        raise ValueError("cannot export a kernel with no positive mass")
    return Kernel(vals / total)
