"""Linear-beta diffusion schedule and the v-parameterization algebra.

Index convention: timesteps run t = 1..T; index 0 is the clean-data sentinel
with beta_0 = 0, alpha_0 = 1, abar_0 = 1 and sigma_0 = 0, so every table below
can be indexed directly with t. All tables are float64; the algebra helpers take
scalar coefficients from the tables and broadcast over whatever array type the
caller passes (numpy arrays and torch tensors both work).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np


@dataclasses.dataclass
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray        # (T+1,) beta[0] = 0
    alpha: np.ndarray       # (T+1,) alpha[t] = 1 - beta[t]
    alpha_bar: np.ndarray   # (T+1,) cumulative product, alpha_bar[0] = 1
    sigma: np.ndarray       # (T+1,) posterior std, sigma[0] = sigma[1] = 0

    # --- construction --------------------------------------------------------

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        """Linearly spaced betas from beta_start to beta_end over T steps."""
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got "
                             f"({beta_start}, {beta_end})")
        beta = np.zeros(T + 1, dtype=np.float64)
        beta[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        var = np.zeros(T + 1, dtype=np.float64)
        # posterior variance beta_t * (1 - abar_{t-1}) / (1 - abar_t); zero at t=1
        var[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        return cls(T=T, beta_start=float(beta_start), beta_end=float(beta_end),
                   beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                   sigma=np.sqrt(var))

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in [1, {self.T}], got {t}")
        return t

    # --- forward process and v-parameterization ------------------------------

    def diffuse(self, x0, t: int, eps):
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
        t = self._check_t(t)
        ab = self.alpha_bar[t]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def v_target(self, x0, eps, t: int):
        """v_t = sqrt(abar_t) eps - sqrt(1 - abar_t) x0."""
        t = self._check_t(t)
        ab = self.alpha_bar[t]
        return np.sqrt(ab) * eps - np.sqrt(1.0 - ab) * x0

    def x0_from_v(self, x_t, v, t: int):
        """Invert the v-parameterization: x0 = sqrt(abar_t) x_t - sqrt(1 - abar_t) v."""
        t = self._check_t(t)
        ab = self.alpha_bar[t]
        return np.sqrt(ab) * x_t - np.sqrt(1.0 - ab) * v

    # --- reverse process -----------------------------------------------------

    def posterior_coeffs(self, t: int) -> tuple[float, float]:
        """Coefficients (c0, ct) of the reverse-step mean mu_t = c0 x0 + ct x_t."""
        t = self._check_t(t)
        ab_t = self.alpha_bar[t]
        ab_prev = self.alpha_bar[t - 1]
        c0 = self.beta[t] * ab_prev / (1.0 - ab_t)
        ct = (1.0 - ab_prev) * self.alpha[t] / (1.0 - ab_t)
        return float(c0), float(ct)

    def posterior_mean(self, x0_hat, x_t, t: int):
        c0, ct = self.posterior_coeffs(t)
        return c0 * x0_hat + ct * x_t

    def posterior_step(self, x0_hat, x_t, t: int, noise):
        """One reverse step: mu_t(x0_hat, x_t) + sigma_t * noise.

        sigma_1 = 0, so the t=1 step is deterministic and returns the mean.
        """
        t = self._check_t(t)
        mu = self.posterior_mean(x0_hat, x_t, t)
        sig = self.sigma[t]
        if sig == 0.0:
            return mu
        return mu + sig * noise

    # --- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls.linear(T=int(d["T"]), beta_start=float(d["beta_start"]),
                          beta_end=float(d["beta_end"]))

    def fingerprint(self) -> str:
        """Stable hash of the defining parameters, for checkpoint validation."""
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]
