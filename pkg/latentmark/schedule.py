"""Noise schedule module: betas, cumulative alphas, forward noising and the sampling grid."""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ParameterError, ScheduleError, ShapeError


class ScheduleKind(Enum):
    """Beta spacing enumeration."""
    LINEAR = "linear"
    SCALED = "scaled"


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete diffusion noise schedule.

    Attributes:
        total_steps: Number of training timesteps T
        betas: Array of T per-step variances, betas[i] belongs to timestep i + 1
        alpha_bars: Array of T + 1 cumulative products with alpha_bars[0] = 1
    """
    total_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Returns the cumulative alpha at timestep t (0 <= t <= T)."""
        if not 0 <= t <= self.total_steps:
            raise ParameterError(f"timestep {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bars[t])


def build_schedule(
    total_steps: int,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    kind: ScheduleKind | str = ScheduleKind.LINEAR,
) -> NoiseSchedule:
    """Builds a noise schedule with linearly spaced (or sqrt-spaced) betas.

    Betas are spaced on a left-closed grid, beta_i = start + (end - start) * i / T
    for i = 0..T-1, so T = 2 from 0.1 to 0.3 gives {0.1, 0.2}.

    Args:
        total_steps: Number of training timesteps T (>= 1)
        beta_start: First beta, 0 < beta_start <= beta_end
        beta_end: Upper end of the beta range, < 1
        kind: "linear" spaces betas directly, "scaled" spaces their square roots

    Returns:
        NoiseSchedule: Schedule with strictly decreasing alpha_bars

    Raises:
        ParameterError: If the range or step count is invalid
    """
    kind = ScheduleKind(kind)
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    fractions = np.arange(total_steps, dtype=np.float64) / total_steps
    if kind is ScheduleKind.LINEAR:
        betas = beta_start + (beta_end - beta_start) * fractions
    else:
        root_start, root_end = np.sqrt(beta_start), np.sqrt(beta_end)
        betas = (root_start + (root_end - root_start) * fractions) ** 2

    alpha_bars = np.empty(total_steps + 1, dtype=np.float64)
    alpha_bars[0] = 1.0
    alpha_bars[1:] = np.cumprod(1.0 - betas)
    return NoiseSchedule(total_steps=total_steps, betas=betas, alpha_bars=alpha_bars)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Samples x_t directly from x_0: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    Args:
        x0: Clean latent grid
        t: Timestep in [0, T]
        eps: Noise grid with the same shape as x0
        schedule: Noise schedule

    Returns:
        np.ndarray: Noised latent grid

    Raises:
        ShapeError: If eps and x0 differ in shape
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match latent shape {x0.shape}")
    alpha_bar = schedule.alpha_bar(t)
    if alpha_bar == 1.0:
        return np.array(x0, dtype=np.float64, copy=True)
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def make_timesteps(total_steps: int, inference_steps: int) -> list[int]:
    """Returns the descending sampling grid t_1 > ... > t_N.

    t_i = T - (i - 1) * (T / N) - (T / N - 1), i.e. (N - i) * stride + 1, so
    T = 1000 and N = 20 give {951, 901, ..., 51, 1} with 251 as the 15th step.

    Args:
        total_steps: Training timesteps T
        inference_steps: Number of sampling steps N (1 <= N <= T)

    Returns:
        list[int]: Strictly decreasing timesteps, last one equal to 1
    """
    if not 1 <= inference_steps <= total_steps:
        raise ParameterError(
            f"inference_steps must be in [1, {total_steps}], got {inference_steps}"
        )
    stride = total_steps // inference_steps
    return [(inference_steps - i) * stride + 1 for i in range(1, inference_steps + 1)]


def ddim_coefficients(
    schedule: NoiseSchedule, t: int, t_prev: int, sigma: float = 0.0
) -> tuple[float, float]:
    """Returns (A, B) with x_prev = A * x_t + B * eps_hat (+ sigma term) for one DDIM step.

    A = sqrt(ab_prev / ab_t) and B = sqrt(1 - ab_prev - sigma^2) - A * sqrt(1 - ab_t),
    i.e. the pred_x0 form regrouped by x_t and eps_hat. Equal alpha_bars with
    sigma = 0 give exactly (1, 0).

    Raises:
        ParameterError: If t <= t_prev or sigma < 0
        ScheduleError: If 1 - ab_prev - sigma^2 < 0
    """
    if not t > t_prev >= 0:
        raise ParameterError(f"a DDIM step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    alpha_bar, alpha_bar_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    radicand = 1.0 - alpha_bar_prev - sigma * sigma
    if radicand < 0:
        raise ScheduleError(
            f"negative radicand 1 - ab_prev - sigma^2 = {radicand:.3e} at t_prev={t_prev}, sigma={sigma}"
        )
    a = np.sqrt(alpha_bar_prev / alpha_bar)
    b = np.sqrt(radicand) - a * np.sqrt(1.0 - alpha_bar)
    return float(a), float(b)
