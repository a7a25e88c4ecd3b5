"""Image-specific v-prediction denoiser with a hard 15x15 receptive field.

The backbone is fully convolutional and deliberately myopic: a stem block of
two 3x3 convolutions followed by five blocks of (3x3 conv + 1x1 conv) and a
1x1 head - seven 3x3 convolutions in total, so any output pixel depends on
exactly the 15x15 input window centered on it. No strides, pooling, attention
or global normalization anywhere; locality is the model's entire inductive
bias, which is what lets a denoiser trained on one small image generalize
across positions and scales.

The timestep enters through a sinusoidal embedding projected per block to a
per-channel (scale, shift) applied right after the block's first convolution;
that conditioning is pointwise, so the receptive field is untouched.
"""

from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn.functional as F
from torch import nn

from .images import ImagePlane
from .schedule import NoiseSchedule


@dataclasses.dataclass
class PDBackboneConfig:
    in_channels: int = 3
    hidden: int = 128
    mixed_blocks: int = 5   # (3x3 + 1x1) blocks after the two-conv stem
    emb_dim: int = 128

    @property
    def receptive_field(self) -> int:
        return 2 * (2 + self.mixed_blocks) + 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of shape (B, dim) for integer timesteps t (B,)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1)
    ).to(t.device)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _CondBlock(nn.Module):
    """conv -> scale/shift(t) -> SiLU -> conv -> SiLU."""

    def __init__(self, cin: int, cout: int, second_kernel: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")
        pad = (second_kernel - 1) // 2
        self.conv2 = nn.Conv2d(cout, cout, second_kernel, padding=pad,
                               padding_mode="reflect")
        self.cond = nn.Linear(emb_dim, 2 * cout)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(x)
        scale, shift = self.cond(emb)[:, :, None, None].chunk(2, dim=1)
        h = h * (1.0 + scale) + shift
        h = F.silu(h)
        return F.silu(self.conv2(h))


class PatchDenoiser(nn.Module):
    """Predicts v from (x_t, t); output has the shape of x_t."""

    def __init__(self, cfg: PDBackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg or PDBackboneConfig()
        c, hid, e = self.cfg.in_channels, self.cfg.hidden, self.cfg.emb_dim
        self.emb_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU())
        blocks = [_CondBlock(c, hid, second_kernel=3, emb_dim=e)]
        blocks += [_CondBlock(hid, hid, second_kernel=1, emb_dim=e)
                   for _ in range(self.cfg.mixed_blocks)]
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(hid, c, 1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W), "
                             f"got {tuple(x.shape)}")
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), dtype=torch.long,
                           device=x.device)
        emb = self.emb_mlp(timestep_embedding(t, self.cfg.emb_dim))
        h = x
        for block in self.blocks:
            h = block(h, emb)
        return self.head(h)


# =============================================================================
# Training
# =============================================================================


@dataclasses.dataclass
class PDTrainConfig:
    steps: int = 20000
    lr: float = 1e-4
    batch_size: int = 1
    crop: int = 64
    seed: int = 0
    device: str = "cpu"
    log_every: int = 500


@dataclasses.dataclass
class PDTrainResult:
    model: PatchDenoiser
    losses: list
    meta: dict


def _random_crop(x: torch.Tensor, size: int) -> torch.Tensor:
    _, _, h, w = x.shape
    ch, cw = min(size, h), min(size, w)
    top = int(torch.randint(0, h - ch + 1, (1,)))
    left = int(torch.randint(0, w - cw + 1, (1,)))
    return x[:, :, top : top + ch, left : left + cw]


def train_denoiser(image: ImagePlane, bcfg: PDBackboneConfig,
                   tcfg: PDTrainConfig, sched: NoiseSchedule,
                   scale: int | None = None,
                   log_fn=None) -> PDTrainResult:
    """Fit the denoiser to one image by v-prediction regression.

    Per step: draw a random crop, a random t in [1, T] and fresh noise, diffuse
    the crop, and regress the model output onto the v target (MSE). Adam with
    cosine-annealed learning rate. All randomness hangs off tcfg.seed, so two
    runs with the same seed produce identical loss traces and weights.

    Args:
        image: the (low-resolution) training image, unit or signed range.
        scale: optional bookkeeping tag stored in the checkpoint metadata.
        log_fn: optional callable(step, loss) invoked every log_every steps.
    """
    if bcfg.in_channels != image.channels:
        raise ValueError(f"backbone expects {bcfg.in_channels} channels, "
                         f"image has {image.channels}")
    device = torch.device(tcfg.device)
    torch.manual_seed(tcfg.seed)
    model = PatchDenoiser(bcfg).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=tcfg.steps)

    signed = image.to_signed()
    x_full = torch.tensor(signed.pixels, dtype=torch.float32, device=device)
    x_full = x_full.permute(2, 0, 1)[None]

    losses = []
    for step in range(tcfg.steps):
        crops = torch.cat([_random_crop(x_full, tcfg.crop)
                           for _ in range(tcfg.batch_size)], dim=0)
        t = torch.randint(1, sched.T + 1, (tcfg.batch_size,), device=device)
        eps = torch.randn_like(crops)
        # per-sample scalar coefficients
        ab = torch.tensor(sched.alpha_bar[t.cpu().numpy()],
                          dtype=torch.float32, device=device)[:, None, None, None]
        x_t = torch.sqrt(ab) * crops + torch.sqrt(1.0 - ab) * eps
        v = torch.sqrt(ab) * eps - torch.sqrt(1.0 - ab) * crops
        pred = model(x_t, t)
        loss = F.mse_loss(pred, v)
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
        losses.append(float(loss.detach()))
        if log_fn is not None and (step % tcfg.log_every == 0
                                   or step == tcfg.steps - 1):
            log_fn(step, losses[-1])

    meta = {
        "backbone": dataclasses.asdict(bcfg),
        "train": dataclasses.asdict(tcfg),
        "schedule": sched.to_dict(),
        "schedule_fingerprint": sched.fingerprint(),
        "seed": tcfg.seed,
        "scale": scale,
        "image_shape": list(image.pixels.shape),
    }
    return PDTrainResult(model=model, losses=losses, meta=meta)


def save_checkpoint(result: PDTrainResult, path) -> None:
    torch.save({"state_dict": result.model.state_dict(),
                "meta": result.meta}, path)


def load_checkpoint(path, device: str = "cpu") -> tuple[PatchDenoiser, dict]:
    payload = torch.load(path, map_location=device, weights_only=True)
    meta = payload["meta"]
    model = PatchDenoiser(PDBackboneConfig(**meta["backbone"]))
    model.load_state_dict(payload["state_dict"])
    model.to(torch.device(device))
    return model, meta
