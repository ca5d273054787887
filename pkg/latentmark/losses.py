"""Quality-preserving regularizers and the weighted watermark objective.

All statistics use the biased (population) variance.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    """Objective weights lambda_msg, lambda_init, lambda_low, lambda_high."""
    msg: float = 0.1
    init: float = 100.0
    low: float = 1000.0
    high: float = 100.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ParameterError(f"loss weight '{name}' must be >= 0, got {value}")


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components and their weighted total."""
    msg: float
    init: float
    low: float
    high: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def l_init(x_T_w: np.ndarray, x_T: np.ndarray) -> float:
    """(mean(x_T^w) - mean(x_T))^2."""
    _same_shape(x_T_w, x_T, "l_init")
    return float((x_T_w.mean() - x_T.mean()) ** 2)


def l_init_grad(x_T_w: np.ndarray, x_T: np.ndarray) -> np.ndarray:
    """Gradient of l_init w.r.t. x_T^w."""
    _same_shape(x_T_w, x_T, "l_init")
    return np.full(x_T_w.shape, 2.0 * (x_T_w.mean() - x_T.mean()) / x_T_w.size)


def _low_single(w: np.ndarray, w_init: np.ndarray) -> float:
    return float((w.mean() - w_init.mean()) ** 2 + (w.var() - w_init.var()) ** 2)


def _low_single_grad(w: np.ndarray, w_init: np.ndarray) -> np.ndarray:
    n = w.size
    centered = w - w.mean()
    return (
        2.0 * (w.mean() - w_init.mean()) / n
        + 2.0 * (w.var() - w_init.var()) * 2.0 * centered / n
    )


def l_low(w_s: np.ndarray, w_d: np.ndarray, w_s_init: np.ndarray, w_d_init: np.ndarray) -> float:
    """Squared mean and variance drift of both watermarks from their initializations."""
    _same_shape(w_s, w_s_init, "l_low structure")
    _same_shape(w_d, w_d_init, "l_low detail")
    return _low_single(w_s, w_s_init) + _low_single(w_d, w_d_init)


def l_low_grad(
    w_s: np.ndarray, w_d: np.ndarray, w_s_init: np.ndarray, w_d_init: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dl_low/dw_s, dl_low/dw_d)."""
    _same_shape(w_s, w_s_init, "l_low structure")
    _same_shape(w_d, w_d_init, "l_low detail")
    return _low_single_grad(w_s, w_s_init), _low_single_grad(w_d, w_d_init)


def _moments(x: np.ndarray) -> tuple[np.ndarray, float, float, float]:
    centered = (x - x.mean()).reshape(-1)
    m2 = float(np.mean(centered ** 2))
    if m2 == 0.0:
        raise DegenerateInputError("high-order statistics need a watermark with nonzero spread")
    return centered, m2, float(np.mean(centered ** 3)), float(np.mean(centered ** 4))


def kurtosis_loss(x: np.ndarray) -> float:
    """(mean(z^4) - 3)^2."""
    _, m2, _, m4 = _moments(x)
    return (m4 / m2 ** 2 - 3.0) ** 2


def skewness_loss(x: np.ndarray) -> float:
    """mean(z^3)^2."""
    _, m2, m3, _ = _moments(x)
    return (m3 / m2 ** 1.5) ** 2


def _high_single(x: np.ndarray) -> float:
    _, m2, m3, m4 = _moments(x)
    return (m4 / m2 ** 2 - 3.0) ** 2 + (m3 / m2 ** 1.5) ** 2


def _standardized_moment_grad(centered: np.ndarray, m2: float, order: int) -> np.ndarray:
    # d/dx_k of M_p / M_2^(p/2); centering contributes the -M_{p-1} term
    n = centered.size
    mp = np.mean(centered ** order)
    mp_minus = np.mean(centered ** (order - 1))
    half = order / 2.0
    return (
        (order / n) * (centered ** (order - 1) - mp_minus) / m2 ** half
        - (order / n) * mp * centered / m2 ** (half + 1.0)
    )


def _high_single_grad(x: np.ndarray) -> np.ndarray:
    centered, m2, m3, m4 = _moments(x)
    kurt = m4 / m2 ** 2
    skew = m3 / m2 ** 1.5
    grad = (
        2.0 * (kurt - 3.0) * _standardized_moment_grad(centered, m2, 4)
        + 2.0 * skew * _standardized_moment_grad(centered, m2, 3)
    )
    return grad.reshape(x.shape)


def l_high(w_s: np.ndarray, w_d: np.ndarray) -> float:
    """Kurtosis and skewness penalties of both watermarks.

    Raises:
        DegenerateInputError: If either watermark is constant
    """
    return _high_single(w_s) + _high_single(w_d)


def l_high_grad(w_s: np.ndarray, w_d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dl_high/dw_s, dl_high/dw_d)."""
    return _high_single_grad(w_s), _high_single_grad(w_d)


def total_loss(msg: float, init: float, low: float, high: float, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the four components.

    Raises:
        ParameterError: If any component is negative
    """
    components = {"msg": msg, "init": init, "low": low, "high": high}
    for name, value in components.items():
        if value < 0:
            raise ParameterError(f"loss component '{name}' must be >= 0, got {value}")
    total = weights.msg * msg + weights.init * init + weights.low * low + weights.high * high
    return LossBreakdown(msg=float(msg), init=float(init), low=float(low), high=float(high), total=float(total))
