"""Noise schedules and the closed-form forward corruption process.

Timestep convention: step 0 is clean data, steps 1..T are progressively
noisier, step T is (near) pure noise. The cumulative signal fraction
``gamma_bar`` satisfies gamma_bar(0) = 1 and
gamma_bar(t) = gamma_bar(t-1) * (1 - beta_t).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .rng import Rng


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/gamma/gamma_bar tables for steps 1..T."""

    T: int
    beta: np.ndarray          # beta[t-1] is the variance added at step t
    gamma: np.ndarray = field(init=False)
    gamma_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T,):
            raise ValueError(f"beta table must have length T={self.T}, got {beta.shape}")
        # beta_t = 0 is admitted only so degenerate no-noise schedules can be
        # constructed for round-trip diagnostics; make_schedule stays strict.
        if not ((beta >= 0) & (beta < 1)).all():
            raise ValueError("every beta_t must lie in [0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", 1.0 - beta)
        object.__setattr__(self, "gamma_bar", np.cumprod(1.0 - beta))

    def beta_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.beta[t - 1])

    def gamma_bar_at(self, t: int) -> float:
        """Cumulative product of (1 - beta) through step t; 1 at t = 0."""
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.gamma_bar[t - 1])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside 1..{self.T}")


def make_schedule(kind: str, T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build a linear or squared-cosine schedule over T steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        # Squared-cosine gamma_bar profile; beta derived from consecutive ratios.
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * np.pi / 2) ** 2
        gbar = f / f[0]
        beta = np.clip(1.0 - gbar[1:] / gbar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind: {kind!r}")
    return NoiseSchedule(T=T, beta=beta)


def _as_data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def forward_sample(sched: NoiseSchedule, z1, t: int, eps) -> Tensor:
    """Jump straight to step t: sqrt(gbar_t) * z1 + sqrt(1 - gbar_t) * eps."""
    z = _as_data(z1)
    e = _as_data(eps)
    if z.shape != e.shape:
        raise ValueError(f"z1 shape {z.shape} != eps shape {e.shape}")
    gbar = sched.gamma_bar_at(t)
    out = np.sqrt(gbar) * z + np.sqrt(1.0 - gbar) * e
    return Tensor(out.astype(z.dtype))


def markov_step(sched: NoiseSchedule, z_prev, t: int, rng: Rng) -> Tensor:
    """One stochastic forward step: N(sqrt(1-beta_t) z_prev, beta_t I)."""
    z = _as_data(z_prev)
    beta = sched.beta_at(t)
    noise = rng.normal(z.shape, dtype=z.dtype)
    out = np.sqrt(1.0 - beta) * z + np.sqrt(beta) * noise
    return Tensor(out.astype(z.dtype))
