"""Bit accuracy and exact binomial detection thresholds."""

from fractions import Fraction
from math import comb
from typing import Sequence

import numpy as np

from .carriers import Message
from .errors import ParameterError, ReportError, ShapeError


def _bits(message: Message | np.ndarray | Sequence[int]) -> np.ndarray:
    return message.bits if isinstance(message, Message) else np.asarray(message)


def matched_bits(message: Message | np.ndarray, decoded: Message | np.ndarray) -> int:
    """Number of positions where the two messages agree."""
    a, b = _bits(message), _bits(decoded)
    if a.shape != b.shape:
        raise ShapeError(f"message lengths differ: {a.shape} vs {b.shape}")
    return int(np.sum(a == b))


def bit_accuracy(message: Message | np.ndarray, decoded: Message | np.ndarray) -> float:
    """Fraction of matching bits."""
    a = _bits(message)
    if a.size == 0:
        raise ShapeError("bit accuracy of an empty message is undefined")
    return matched_bits(message, decoded) / a.size


def tail_probability(k: int, tau: int) -> Fraction:
    """Exact P(Binomial(k, 1/2) >= tau) as a fraction."""
    if k < 0:
        raise ParameterError(f"k must be >= 0, got {k}")
    if tau <= 0:
        return Fraction(1)
    if tau > k:
        return Fraction(0)
    return Fraction(sum(comb(k, j) for j in range(tau, k + 1)), 2 ** k)


def detection_threshold(k: int, fpr: float) -> int:
    """Smallest tau with P(Binomial(k, 1/2) >= tau) <= fpr.

    The comparison is exact: fpr is converted to the rational value of its float.

    Returns:
        int: tau in [0, k], or k + 1 when no threshold reaches fpr

    Raises:
        ParameterError: If fpr is not in (0, 1) or k < 1
    """
    if not 0.0 < fpr < 1.0:
        raise ParameterError(f"fpr must be in (0, 1), got {fpr}")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    target = Fraction(fpr)
    # tail_probability is non-increasing in tau
    return next((tau for tau in range(k + 1) if tail_probability(k, tau) <= target), k + 1)


def tpr_at_fpr(counts: Sequence[int], k: int, fpr: float) -> float:
    """Fraction of images whose matched-bit count reaches detection_threshold(k, fpr).

    Raises:
        ReportError: If counts is empty
        ParameterError: If a count is outside [0, k]
    """
    counts = np.asarray(list(counts), dtype=np.int64)
    if counts.size == 0:
        raise ReportError("TPR needs at least one image")
    if np.any(counts < 0) or np.any(counts > k):
        raise ParameterError(f"matched-bit counts must lie in [0, {k}]")
    tau = detection_threshold(k, fpr)
    return float(np.mean(counts >= tau))
