"""Joint kernel + image recovery by fused reverse diffusion.

One reverse diffusion pass (T_nd -> 1) of a frozen, image-specific patch
denoiser is interleaved with joint optimization of two per-image networks: an
implicit kernel field and an image refiner. Each outer step t runs a few inner
iterations that (1) refine the previous clean estimate, (2) re-noise it to
level t around the carried sample, (3) denoise with the patch model via the
v-parameterization, (4) refine again, and (5) take one optimizer step on
  || LR - (x0_t * k) down_s ||^2 + || LR - (x0_t+1 * k) down_s ||^2 + COM(k),
where down_s is the exact degradation operator and COM pulls the kernel
centroid to the canvas center (fixing the kernel/image translation ambiguity).
The outer transition then steps the carried sample toward t-1.

Everything is deterministic under a fixed seed; the patch denoiser is never
updated.
"""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np
import torch

from .degradation import Kernel, blur_downsample
from .images import SIGNED, ImagePlane, bicubic_upscale
from .kernel_inr import INRConfig, KernelINR, com_penalty, export_kernel
from .patch_diffusion import PatchDenoiser
from .refiner import Refiner, RefinerConfig
from .schedule import NoiseSchedule


class FusionDivergence(RuntimeError):
    """Loss became non-finite; carries diagnostics for post-mortems."""

    def __init__(self, msg, t=None, kernel=None, x0=None, trace=None):
        super().__init__(msg)
        self.t = t
        self.kernel = kernel
        self.x0 = x0
        self.trace = trace


@dataclasses.dataclass
class FusionConfig:
    scale: int = 4
    t_nd: int = 400             # starting timestep of the reverse pass
    n_iter: int = 20            # inner iterations per outer step
    n_iter_initial: int = 100   # inner iterations at the very first step
    lr: float = 1e-4
    lr_min: float = 5e-5        # cosine target reached at each step's end
    com_weight: float = 1.0
    kernel_size: int = 24
    seed: int = 0
    device: str = "cpu"
    snapshot_every: int = 0     # outer steps between trace snapshots; 0 = off

    def validate(self, sched: NoiseSchedule) -> None:
        if not 1 <= self.t_nd <= sched.T:
            raise ValueError(f"t_nd={self.t_nd} outside [1, {sched.T}]")
        if self.n_iter < 1 or self.n_iter_initial < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")


@dataclasses.dataclass
class RunTrace:
    initial_residual: float
    steps: list = dataclasses.field(default_factory=list)
    snapshots: list = dataclasses.field(default_factory=list)

    @property
    def final_residual(self) -> float:
        return self.steps[-1]["residual"] if self.steps else float("nan")


@dataclasses.dataclass
class FusionResult:
    image: ImagePlane       # unit range, (s*h, s*w, C)
    kernel: Kernel          # exported: clamped, unit sum
    trace: RunTrace


@dataclasses.dataclass
class FusionState:
    cfg: FusionConfig
    sched: NoiseSchedule
    lr_t: torch.Tensor          # (1, C, h, w) signed range
    t: int
    x: torch.Tensor             # carried noisy sample (1, C, H, W)
    x0_prev: torch.Tensor       # refined clean estimate, in [-1, 1]
    refiner: Refiner
    inr: KernelINR
    denoiser: PatchDenoiser
    opt: torch.optim.Optimizer
    gen: torch.Generator
    trace: RunTrace
    first_step_done: bool = False
    # cached from the latest inner iteration, consumed by the transition
    last_x0_ref: torch.Tensor | None = None
    last_x_hat: torch.Tensor | None = None
    last_terms: tuple | None = None


def _to_tensor(img: ImagePlane, device) -> torch.Tensor:
    arr = np.moveaxis(img.pixels, 2, 0)[None]
    return torch.tensor(arr, dtype=torch.float32, device=device)


def consistency_terms(lr_t, x0_a, x0_b, k_raw, s):
    """The two squared-norm data terms of the fusion loss.

    Both use the raw (unnormalized) kernel field and the shared degradation
    operator; term_a covers the current clean estimate, term_b the previous.
    """
    term_a = ((lr_t - blur_downsample(x0_a, k_raw, s)) ** 2).sum()
    term_b = ((lr_t - blur_downsample(x0_b, k_raw, s)) ** 2).sum()
    return term_a, term_b


def init_fusion(lr_image: ImagePlane, denoiser: PatchDenoiser,
                cfg: FusionConfig, sched: NoiseSchedule,
                denoiser_meta: dict | None = None) -> FusionState:
    """Build the initial state: noised bicubic guess plus fresh networks.

    The carried sample starts at sqrt(abar_Tnd) * bicubic_up(LR) +
    sqrt(1 - abar_Tnd) * noise; the clean estimate starts at the (un-noised)
    bicubic upscale. Raises if the denoiser was trained against a different
    schedule or scale than requested.
    """
    cfg.validate(sched)
    if denoiser_meta is not None:
        fp = denoiser_meta.get("schedule_fingerprint")
        if fp is not None and fp != sched.fingerprint():
            raise ValueError("denoiser checkpoint was trained on a different "
                             "noise schedule")
        ck_scale = denoiser_meta.get("scale")
        if ck_scale is not None and int(ck_scale) != cfg.scale:
            raise ValueError(f"denoiser checkpoint tagged scale={ck_scale}, "
                             f"run requests scale={cfg.scale}")
    if lr_image.channels != denoiser.cfg.in_channels:
        raise ValueError("LR image channels do not match the denoiser")

    device = torch.device(cfg.device)
    denoiser = denoiser.to(device).eval()
    denoiser.requires_grad_(False)

    lr_t = _to_tensor(lr_image.to_signed(), device)
    bic = bicubic_upscale(lr_image.to_unit(), cfg.scale).to_signed()
    x0_prev = _to_tensor(bic, device)

    torch.manual_seed(cfg.seed)  # network initialization stream
    refiner = Refiner(RefinerConfig(in_channels=lr_image.channels)).to(device)
    inr = KernelINR(INRConfig(canvas=(cfg.kernel_size, cfg.kernel_size))).to(device)

    gen = torch.Generator(device=device)
    gen.manual_seed(cfg.seed)    # noise stream
    eps = torch.randn(x0_prev.shape, generator=gen, device=device)
    ab = sched.alpha_bar[cfg.t_nd]
    x = np.sqrt(ab) * x0_prev + np.sqrt(1.0 - ab) * eps

    opt = torch.optim.Adam([
        {"params": refiner.parameters()},
        {"params": inr.parameters()},
    ], lr=cfg.lr)

    with torch.no_grad():
        k0 = inr.kernel()
        resid0 = ((lr_t - blur_downsample(x0_prev, k0, cfg.scale)) ** 2).sum()
        initial_residual = float(resid0) / lr_t.numel()

    return FusionState(cfg=cfg, sched=sched, lr_t=lr_t, t=cfg.t_nd, x=x,
                       x0_prev=x0_prev, refiner=refiner, inr=inr,
                       denoiser=denoiser, opt=opt, gen=gen,
                       trace=RunTrace(initial_residual=initial_residual))


def fusion_inner_step(state: FusionState, xi: torch.Tensor) -> float:
    """One joint optimization step at the current t. Returns the loss value.

    xi is the re-noising draw for this outer step; the caller samples it once
    and passes the same tensor to every inner iteration of the step.
    """
    cfg, sched, t = state.cfg, state.sched, state.t
    tp1 = min(t + 1, sched.T)

    k_raw = state.inr.kernel()
    x0_tp1_ref = state.refiner(state.x0_prev)
    x_hat = sched.posterior_mean(x0_tp1_ref, state.x, tp1) \
        + float(sched.sigma[tp1]) * xi
    v_hat = state.denoiser(x_hat, t)
    x0_t = sched.x0_from_v(x_hat, v_hat, t)
    x0_t_ref = state.refiner(x0_t)

    term_a, term_b = consistency_terms(state.lr_t, x0_t_ref, x0_tp1_ref,
                                       k_raw, cfg.scale)
    com = com_penalty(k_raw, cfg.com_weight)
    loss = term_a + term_b + com
    if not torch.isfinite(loss):
        raise FusionDivergence(
            f"non-finite loss at t={t}", t=t,
            kernel=k_raw.detach().cpu().numpy(),
            x0=x0_t_ref.detach().cpu().numpy(), trace=state.trace)

    state.opt.zero_grad()
    loss.backward()
    state.opt.step()

    state.last_x0_ref = x0_t_ref.detach()
    state.last_x_hat = x_hat.detach()
    state.last_terms = (float(term_a.detach()), float(term_b.detach()),
                        float(com.detach()))
    return float(loss.detach())


def _cosine_lr(cfg: FusionConfig, i: int, n: int) -> float:
    if n == 1:
        return cfg.lr
    frac = i / (n - 1)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + np.cos(np.pi * frac))


def fusion_outer_step(state: FusionState) -> None:
    """Run the inner loop at the current t, then step the sample to t-1."""
    cfg, sched, t = state.cfg, state.sched, state.t
    if t < 1:
        raise RuntimeError("reverse pass already finished")
    n = cfg.n_iter if state.first_step_done else cfg.n_iter_initial
    xi = torch.randn(state.x.shape, generator=state.gen,
                     device=state.x.device)
    loss = float("nan")
    for i in range(n):
        lr_i = _cosine_lr(cfg, i, n)
        for group in state.opt.param_groups:
            group["lr"] = lr_i
        loss = fusion_inner_step(state, xi)

    with torch.no_grad():
        zeta = torch.randn(state.x.shape, generator=state.gen,
                           device=state.x.device)
        state.x = sched.posterior_step(state.last_x0_ref, state.last_x_hat,
                                       t, zeta)
        state.x0_prev = state.last_x0_ref

    term_a, term_b, com = state.last_terms
    state.trace.steps.append({
        "t": t,
        "loss": loss,
        "residual": term_a / state.lr_t.numel(),
        "residual_prev": term_b / state.lr_t.numel(),
        "com": com,
        "lr_final": _cosine_lr(cfg, n - 1, n),
        "xi_digest": hashlib.sha256(xi.numpy().tobytes()).hexdigest()[:12],
    })
    if cfg.snapshot_every and (len(state.trace.steps) % cfg.snapshot_every == 0):
        with torch.no_grad():
            state.trace.snapshots.append(
                (t, state.x0_prev.cpu().numpy().copy(),
                 state.inr.kernel().cpu().numpy().copy()))
    state.first_step_done = True
    state.t = t - 1


def run_fusion(lr_image: ImagePlane, denoiser: PatchDenoiser,
               cfg: FusionConfig, sched: NoiseSchedule,
               denoiser_meta: dict | None = None,
               log_fn=None) -> FusionResult:
    """Full reverse pass from t_nd down to 1.

    Returns the recovered HR image (unit range), the exported kernel and the
    per-step trace. The final image is the last refined clean estimate: at
    t=1 the reverse-step mean collapses onto it exactly.
    """
    state = init_fusion(lr_image, denoiser, cfg, sched, denoiser_meta)
    pre = {k: v.detach().clone() for k, v in denoiser.state_dict().items()}
    while state.t >= 1:
        fusion_outer_step(state)
        if log_fn is not None:
            log_fn(state.trace.steps[-1])
    for k, v in denoiser.state_dict().items():
        if not torch.equal(v, pre[k]):
            raise RuntimeError("frozen denoiser weights changed during fusion")

    hr_signed = state.x[0].cpu().numpy()
    hr = ImagePlane(np.moveaxis(hr_signed, 0, 2).astype(np.float64),
                    SIGNED).to_unit().clamped()
    kernel = export_kernel(state.inr.kernel())
    return FusionResult(image=hr, kernel=kernel, trace=state.trace)
