"""Diffusion noise schedule and sampler-step/training-timestep mapping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep betas and cumulative alpha-bar products for t = 1..T.

    alpha_bar(0) == 1 by convention (t = 0 is clean data).
    """

    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        abar = np.asarray(self.alpha_bar, dtype=np.float64)
        if beta.ndim != 1 or abar.shape != beta.shape:
            raise ValueError("beta and alpha_bar must be 1-D arrays of equal length")
        if not (np.all(beta > 0) and np.all(beta < 1) and np.all(np.diff(beta) >= 0)):
            raise ValueError("betas must be in (0, 1) and non-decreasing")
        if not np.all(np.diff(abar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        for name, arr in (("beta", beta), ("alpha_bar", abar)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def total_timesteps(self) -> int:
        return self.beta.shape[0]

    @staticmethod
    def linear(total_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        beta = np.linspace(beta_start, beta_end, total_timesteps, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - beta)
        return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product at timestep t; t = 0 returns 1 by convention."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.total_timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.total_timesteps}]")
        return float(self.alpha_bar[t - 1])

    def sampler_timesteps(self, steps: int) -> np.ndarray:
        """Uniformly strided training timesteps for a sampler run.

        Returns steps+1 strictly decreasing values from T down to 0; denoising
        step tau (1-based, tau=1 noisiest) moves from ts[tau-1] to ts[tau].
        """
        if not 2 <= steps <= self.total_timesteps:
            raise ValueError(f"steps must be in [2, {self.total_timesteps}]")
        ts = np.rint(self.total_timesteps * (1.0 - np.arange(steps + 1) / steps)).astype(np.int64)
        if np.any(np.diff(ts) >= 0):
            raise ValueError("sampler timesteps are not strictly decreasing")
        return ts
