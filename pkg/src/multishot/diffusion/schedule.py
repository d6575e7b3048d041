"""DDPM noise schedule: linear betas, cumulative-product alpha bars."""

from __future__ import annotations

import numpy as np


class NoiseSchedule:
    def __init__(self, timesteps: int = 1000, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        self.timesteps = timesteps
        self.betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        if not ((self.betas > 0).all() and (self.betas < 1).all()):
            raise ValueError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def sqrt_alpha_bar(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bars[t]))

    def sqrt_one_minus_alpha_bar(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bars[t]))


def forward_diffuse(v0: np.ndarray, t: int, eps: np.ndarray,
                    schedule: NoiseSchedule) -> np.ndarray:
    """v_t = sqrt(abar_t) * v0 + sqrt(1 - abar_t) * eps."""
    if eps.shape != v0.shape:
        raise ValueError("noise must match the clean signal's shape")
    return schedule.sqrt_alpha_bar(t) * v0 + schedule.sqrt_one_minus_alpha_bar(t) * eps
