"""The diffusion noise schedule, shared by the model and the samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_STEPS = 100
# A linear schedule ending at 2e-2 is the thousand-step convention; at
# N=100 it would leave alpha_bar_N at 0.36 and the chain nowhere near
# pure noise.  Ending at 0.1 gives alpha_bar_100 ~ 0.006.
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar arrays (index t-1 holds step t) plus the
    reverse-process noise scale sigma, with sigma_1 = 0 so the final
    denoising step is deterministic."""

    n_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar with the t=0 convention alpha_bar_0 := 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def schedule_from_beta(beta: np.ndarray) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64).copy()
    if beta.ndim != 1 or len(beta) < 2:
        raise ValueError("beta must be a 1-D array with at least two steps")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("beta values must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(len(beta), beta, alpha, alpha_bar, sigma)


def make_schedule(
    n_steps: int = DEFAULT_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    if n_steps < 2:
        raise ValueError("need at least two diffusion steps")
    return schedule_from_beta(np.linspace(beta_start, beta_end, n_steps))
