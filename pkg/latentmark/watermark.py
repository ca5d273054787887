"""Watermark embedding operators.

The structure watermark w_s enters the initial latent through a variance
preserving two-step normalization; the detail watermark w_d replaces the
stochastic sigma * eps term of one DDIM step.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, ParameterError, RadicandError, ShapeError
from .schedule import NoiseSchedule, ddim_coefficients


@dataclass(frozen=True)
class WatermarkPair:
    """Learnable structure and detail watermarks.

    Attributes:
        w_s: Structure watermark, latent-shaped
        w_d: Detail watermark, latent-shaped
        init_variance: Variance the pair was initialized with
        sigma_td: Fixed sigma used in the detail step's coefficient
        seed: Initialization seed, if known
    """
    w_s: np.ndarray
    w_d: np.ndarray
    init_variance: float = 0.01
    sigma_td: float = 0.1
    seed: int | None = None

    def __post_init__(self):
        if self.w_s.shape != self.w_d.shape:
            raise ShapeError(f"w_s shape {self.w_s.shape} differs from w_d shape {self.w_d.shape}")
        if self.init_variance <= 0:
            raise ParameterError(f"init_variance must be positive, got {self.init_variance}")
        if self.sigma_td < 0:
            raise ParameterError(f"sigma_td must be >= 0, got {self.sigma_td}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.w_s.shape)

    def with_values(self, w_s: np.ndarray, w_d: np.ndarray) -> "WatermarkPair":
        """Returns a copy carrying new watermark values and the same metadata."""
        return WatermarkPair(w_s, w_d, self.init_variance, self.sigma_td, self.seed)


@dataclass(frozen=True)
class EmbedConfig:
    """Injection timesteps.

    Attributes:
        t_s: Structure injection timestep, always the first sampling step
        t_d: Detail injection timestep, strictly later in the trajectory
    """
    t_s: int
    t_d: int

    @classmethod
    def for_grid(cls, timesteps: Sequence[int], t_d: int) -> "EmbedConfig":
        """Builds an EmbedConfig for a sampling grid.

        Raises:
            ConfigError: If t_d is off the grid or equals the first step
        """
        if t_d not in timesteps:
            raise ConfigError(f"detail step {t_d} is not on the sampling grid {list(timesteps)}")
        if t_d == timesteps[0]:
            raise ConfigError("detail step must come after the structure step")
        return cls(t_s=int(timesteps[0]), t_d=int(t_d))


def init_watermarks(
    shape: Sequence[int],
    variance: float = 0.01,
    seed: int = 0,
    sigma_td: float = 0.1,
) -> WatermarkPair:
    """Draws w_s and w_d i.i.d. from N(0, variance).

    Raises:
        ParameterError: If variance is not positive
    """
    if variance <= 0:
        raise ParameterError(f"watermark variance must be positive, got {variance}")
    rng = np.random.default_rng(seed)
    std = np.sqrt(variance)
    w_s = rng.normal(0.0, std, size=tuple(shape))
    w_d = rng.normal(0.0, std, size=tuple(shape))
    return WatermarkPair(w_s=w_s, w_d=w_d, init_variance=variance, sigma_td=sigma_td, seed=seed)


def _structure_scales(x_T: np.ndarray, w_s: np.ndarray) -> tuple[float, float]:
    if x_T.shape != w_s.shape:
        raise ShapeError(f"w_s shape {w_s.shape} does not match latent shape {x_T.shape}")
    var_x, var_w = float(np.var(x_T)), float(np.var(w_s))
    if var_w >= var_x:
        raise RadicandError(f"var(w_s)={var_w:.4g} must be below var(x_T)={var_x:.4g}")
    return var_x, float(np.sqrt((var_x - var_w) / var_x))


def embed_structure(x_T: np.ndarray, w_s: np.ndarray) -> np.ndarray:
    """Structure embedding F_s(x_T, w_s).

    Step 1: y = w_s + gamma * x_T with gamma = sqrt((var(x_T) - var(w_s)) / var(x_T)).
    Step 2: rescale y so that var(output) = var(x_T) exactly.

    Raises:
        RadicandError: If var(w_s) >= var(x_T)
        DegenerateInputError: If var(y) = 0
    """
    var_x, gamma = _structure_scales(x_T, w_s)
    y = w_s + gamma * x_T
    var_y = float(np.var(y))
    if var_y == 0.0:
        raise DegenerateInputError("structure embedding produced a constant latent")
    return y * np.sqrt(var_x / var_y)


def structure_vjp(x_T: np.ndarray, w_s: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Returns cotangent^T dF_s/dw_s, including gamma's and the rescale's dependence on w_s.

    Args:
        x_T: Unwatermarked initial latent (held fixed)
        w_s: Structure watermark
        cotangent: dL/d(F_s output)

    Returns:
        np.ndarray: dL/dw_s
    """
    n = x_T.size
    var_x, gamma = _structure_scales(x_T, w_s)
    y = w_s + gamma * x_T
    y_centered = y - y.mean()
    var_y = float(np.mean(y_centered ** 2))
    if var_y == 0.0:
        raise DegenerateInputError("structure embedding produced a constant latent")
    rescale = np.sqrt(var_x / var_y)

    # out = rescale * y, rescale depends on var(y)
    grad_var_y = -float(np.sum(cotangent * y)) * rescale / (2.0 * var_y)
    grad_y = rescale * cotangent + grad_var_y * 2.0 * y_centered / n

    # y = w_s + gamma * x_T, gamma depends on var(w_s)
    grad_gamma = float(np.sum(grad_y * x_T))
    grad_var_w = -grad_gamma / (2.0 * gamma * var_x)
    return grad_y + grad_var_w * 2.0 * (w_s - w_s.mean()) / n


def invert_structure(x_T_w: np.ndarray, w_s: np.ndarray) -> np.ndarray:
    """Recovers x_T from F_s(x_T, w_s) and w_s.

    F_s keeps var(x_T), so var(x_T) = var(x_T^w). Writing y = c * x_T^w, the
    requirement var((y - w_s) / gamma) = var(x_T) is a quadratic in c whose
    positive root is taken.

    Raises:
        DegenerateInputError: If the quadratic has no real positive root
    """
    var_x, gamma = _structure_scales(x_T_w, w_s)
    var_w = float(np.var(w_s))
    cov = float(np.mean((x_T_w - x_T_w.mean()) * (w_s - w_s.mean())))
    discriminant = cov * cov - var_x * (2.0 * var_w - var_x)
    if discriminant < 0:
        raise DegenerateInputError("structure embedding is not invertible for this watermark")
    c = (cov + np.sqrt(discriminant)) / var_x
    if c <= 0:
        raise DegenerateInputError("structure inverse has no positive scale root")
    return (c * x_T_w - w_s) / gamma


def embed_detail(
    x_td: np.ndarray,
    eps_hat: np.ndarray,
    t_d: int,
    t_prev: int,
    w_d: np.ndarray,
    sigma_td: float,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Detail embedding F_d: a DDIM step whose sigma * eps term is replaced by w_d.

    Returns sqrt(ab_prev) * pred_x0 + sqrt(1 - ab_prev - sigma_td^2) * eps_hat + w_d.

    Raises:
        ScheduleError: If 1 - ab_prev - sigma_td^2 < 0
        ShapeError: If w_d does not match the latent
    """
    if w_d.shape != x_td.shape or eps_hat.shape != x_td.shape:
        raise ShapeError("x_td, eps_hat and w_d must share one shape")
    a, b = ddim_coefficients(schedule, t_d, t_prev, sigma_td)
    return a * x_td + b * eps_hat + w_d
