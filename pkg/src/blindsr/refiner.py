"""Encoder-decoder image refiner, re-initialized per image.

A 5-level U-Net (32 filters at the input level doubling to 512 at the bottom,
two 3x3 conv + batchnorm + ReLU layers per block, stride-2 conv downsampling,
nearest-neighbor + 3x3 conv upsampling, concatenation skips) with a tanh head,
so outputs always live in [-1, 1]. Batchnorm stays in training mode for every
call: the module is an optimization variable, never a frozen predictor, and
batch statistics are part of how it regularizes.

Inputs of arbitrary size are reflect-padded up to a multiple of 2^(levels-1)
and cropped back after the pass.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn.functional as F
from torch import nn


@dataclasses.dataclass
class RefinerConfig:
    in_channels: int = 3
    levels: int = 5
    base_filters: int = 32
    bottom_filters: int = 512

    def filters(self) -> list[int]:
        f = [self.base_filters * (2 ** i) for i in range(self.levels)]
        if f[-1] != self.bottom_filters:
            raise ValueError(
                f"{self.base_filters} doubled over {self.levels} levels gives "
                f"{f[-1]}, config says {self.bottom_filters}")
        return f


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect"),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, padding_mode="reflect"),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Refiner(nn.Module):
    def __init__(self, cfg: RefinerConfig | None = None):
        super().__init__()
        self.cfg = cfg or RefinerConfig()
        f = self.cfg.filters()
        c = self.cfg.in_channels
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        cin = c
        for i in range(self.cfg.levels):
            self.enc.append(_block(cin, f[i]))
            if i < self.cfg.levels - 1:
                self.down.append(nn.Conv2d(f[i], f[i + 1], 3, stride=2,
                                           padding=1, padding_mode="reflect"))
                cin = f[i + 1]
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(self.cfg.levels - 1)):
            self.up.append(nn.Conv2d(f[i + 1], f[i], 3, padding=1,
                                     padding_mode="reflect"))
            self.dec.append(_block(2 * f[i], f[i]))
        self.head = nn.Conv2d(f[0], c, 1)
        # batch statistics always; see module docstring
        self.train()

    def train(self, mode: bool = True):
        return super().train(True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W), "
                             f"got {tuple(x.shape)}")
        mult = 2 ** (self.cfg.levels - 1)
        h, w = x.shape[2], x.shape[3]
        if min(h, w) <= mult:
            # bottom level would collapse to 1x1 and reflect-padded convs break
            raise ValueError(f"input {h}x{w} too small for {self.cfg.levels} "
                             f"levels; need more than {mult} per side")
        ph, pw = (-h) % mult, (-w) % mult
        if ph or pw:
            if ph >= h or pw >= w:
                raise ValueError(f"input {h}x{w} too small to pad to a "
                                 f"multiple of {mult}")
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        skips = []
        for i in range(self.cfg.levels - 1):
            x = self.enc[i](x)
            skips.append(x)
            x = self.down[i](x)
        x = self.enc[-1](x)
        for j, i in enumerate(reversed(range(self.cfg.levels - 1))):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.up[j](x)
            x = self.dec[j](torch.cat([skips[i], x], dim=1))
        x = torch.tanh(self.head(x))
        return x[:, :, :h, :w]
