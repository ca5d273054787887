"""Gaussian-mixture data prior and its closed-form noise predictor.

The marginal of the mixture at timestep t is

    p_t(x) = sum_j pi_j N(x; sqrt(ab_t) mu_j, (ab_t sigma_j^2 + 1 - ab_t) I)

and the predicted noise is eps_hat = -sqrt(1 - ab_t) * grad log p_t(x). Everything
here works on flattened float64 vectors internally and reshapes at the edges.
"""

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import logsumexp, softmax

from .errors import ConditionError, ParameterError, ShapeError
from .schedule import NoiseSchedule

UNCONDITIONAL = "unconditional"


@dataclass(frozen=True)
class MixturePrior:
    """Isotropic Gaussian mixture over latent grids.

    Attributes:
        weights: Mixture weights pi_j, shape (K,), summing to one
        means: Component means mu_j, shape (K, C, H, W)
        variances: Scalar component variances sigma_j^2, shape (K,)
        labels: One condition label per component
    """
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        k = len(self.weights)
        if k == 0:
            raise ParameterError("a mixture prior needs at least one component")
        if self.means.shape[0] != k or len(self.variances) != k or len(self.labels) != k:
            raise ShapeError("weights, means, variances and labels must have one entry per component")
        if np.any(self.weights <= 0) or np.any(self.weights > 1):
            raise ParameterError("mixture weights must lie in (0, 1]")
        if not np.isclose(self.weights.sum(), 1.0, rtol=0, atol=1e-12):
            raise ParameterError(f"mixture weights sum to {self.weights.sum()}, expected 1")
        if np.any(self.variances <= 0):
            raise ParameterError("component variances must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        """Latent grid shape (C, H, W)."""
        return tuple(self.means.shape[1:])

    @property
    def size(self) -> int:
        """Number of elements in one latent grid."""
        return int(np.prod(self.shape))

    def restrict(self, condition: str | None) -> "MixturePrior":
        """Returns the components carrying a label, with renormalized weights.

        Args:
            condition: Label to keep; None or "unconditional" keeps everything

        Raises:
            ConditionError: If no component carries the label
        """
        if is_unconditional(condition):
            return self
        keep = [i for i, label in enumerate(self.labels) if label == condition]
        if not keep:
            raise ConditionError(
                f"no prior component carries label '{condition}' (labels: {sorted(set(self.labels))})"
            )
        weights = self.weights[keep]
        return MixturePrior(
            weights=weights / weights.sum(),
            means=self.means[keep],
            variances=self.variances[keep],
            labels=tuple(self.labels[i] for i in keep),
        )


def is_unconditional(condition: str | None) -> bool:
    """True for None and the "unconditional" sentinel label."""
    return condition is None or condition == UNCONDITIONAL


def make_prior(
    shape: Sequence[int],
    components: int = 4,
    variance: float = 0.25,
    mean_scale: float = 1.0,
    smoothing: float = 1.0,
    labels: Sequence[str] | None = None,
    weights: Sequence[float] | None = None,
    seed: int = 7,
) -> MixturePrior:
    """Builds a mixture prior with smooth, seeded component means.

    Each mean is a Gaussian-filtered white-noise grid rescaled to RMS mean_scale,
    which gives every component a distinct low-frequency "image".

    Args:
        shape: Latent grid shape (C, H, W)
        components: Number of mixture components K
        variance: Shared component variance sigma^2
        mean_scale: RMS amplitude of each mean grid
        smoothing: Spatial Gaussian filter width in grid cells (0 disables)
        labels: Condition label per component (defaults to "a"/"b" alternating)
        weights: Mixture weights (defaults to uniform)
        seed: Seed for the mean grids

    Returns:
        MixturePrior: The constructed prior
    """
    shape = tuple(int(s) for s in shape)
    if labels is None:
        labels = ["a" if j % 2 == 0 else "b" for j in range(components)]
    if weights is None:
        weights = np.full(components, 1.0 / components)

    rng = np.random.default_rng(seed)
    means = rng.standard_normal((components, *shape))
    if smoothing > 0:
        # Smooth spatial axes only; channels stay independent
        means = gaussian_filter(means, sigma=(0, 0, smoothing, smoothing), mode="wrap")
    rms = np.sqrt(np.mean(means.reshape(components, -1) ** 2, axis=1))
    means = means / rms.reshape(-1, 1, 1, 1) * mean_scale

    return MixturePrior(
        weights=np.asarray(weights, dtype=np.float64),
        means=means,
        variances=np.full(components, float(variance)),
        labels=tuple(str(label) for label in labels),
    )


@dataclass(frozen=True)
class _MixtureTerm:
    """One mixture's contribution to eps_hat, evaluated at a point.

    eps contribution = coeff * ubar, with ubar = sum_j r_j u_j and
    u_j = (x - sqrt(ab) mu_j) / v_j.
    """
    coeff: float
    responsibilities: np.ndarray
    scaled_residuals: np.ndarray
    ubar: np.ndarray
    alpha: float


def _evaluate_mixture(x: np.ndarray, alpha_bar: float, prior: MixturePrior, coeff: float) -> _MixtureTerm:
    n = x.size
    means = prior.means.reshape(len(prior.weights), n)
    v = alpha_bar * prior.variances + (1.0 - alpha_bar)
    diff = x[None, :] - np.sqrt(alpha_bar) * means
    sq = np.einsum("kn,kn->k", diff, diff)
    logits = np.log(prior.weights) - 0.5 * n * np.log(v) - 0.5 * sq / v
    r = softmax(logits)
    u = diff / v[:, None]
    return _MixtureTerm(
        coeff=coeff,
        responsibilities=r,
        scaled_residuals=u,
        ubar=r @ u,
        alpha=float(np.dot(r, 1.0 / v)),
    )


@dataclass(frozen=True)
class EpsilonLinearization:
    """Noise prediction at one point together with its exact derivatives.

    The Jacobian of eps_hat w.r.t. x has the form diag * I + P Q^T with at most
    2K columns in P and Q, which makes Newton solves cheap (Woodbury).

    Attributes:
        eps: Predicted noise (flattened)
        eps_cond: Conditional prediction when guidance is active, else None
        eps_uncond: Unconditional prediction when guidance is active, else None
    """
    eps: np.ndarray
    eps_cond: np.ndarray | None
    eps_uncond: np.ndarray | None
    terms: tuple[_MixtureTerm, ...] = field(repr=False)

    def vjp(self, cotangent: np.ndarray) -> np.ndarray:
        """Returns cotangent^T d eps / d x (flattened)."""
        out = np.zeros_like(cotangent)
        for term in self.terms:
            r, u = term.responsibilities, term.scaled_residuals
            weighted = r * (u @ cotangent)
            out += term.coeff * (term.alpha * cotangent + weighted.sum() * term.ubar - weighted @ u)
        return out

    def jvp(self, tangent: np.ndarray) -> np.ndarray:
        """Returns (d eps / d x) tangent (flattened)."""
        out = np.zeros_like(tangent)
        for term in self.terms:
            r, u = term.responsibilities, term.scaled_residuals
            weighted = r * (term.ubar @ tangent - u @ tangent)
            out += term.coeff * (term.alpha * tangent + weighted @ u)
        return out

    def low_rank_factors(self) -> tuple[float, np.ndarray, np.ndarray]:
        """Returns (diag, P, Q) with d eps / d x = diag * I + P @ Q.T."""
        diag = sum(term.coeff * term.alpha for term in self.terms)
        p_cols = [term.coeff * term.responsibilities[:, None] * term.scaled_residuals for term in self.terms]
        q_cols = [term.ubar[None, :] - term.scaled_residuals for term in self.terms]
        return diag, np.concatenate(p_cols).T, np.concatenate(q_cols).T


def linearize_epsilon(
    x_t: np.ndarray,
    t: int,
    prior: MixturePrior,
    condition: str | None,
    scale: float | None,
    schedule: NoiseSchedule,
) -> EpsilonLinearization:
    """Evaluates the (optionally guided) noise predictor and keeps what its VJP needs.

    Args:
        x_t: Latent at timestep t, shape of the prior grid
        t: Timestep in [1, T]
        prior: Mixture prior
        condition: Condition label, None or "unconditional"
        scale: Guidance scale s; None means no guidance (plain conditional restriction)
        schedule: Noise schedule

    Returns:
        EpsilonLinearization: Prediction plus derivative data
    """
    if x_t.shape != prior.shape:
        raise ShapeError(f"latent shape {x_t.shape} does not match prior shape {prior.shape}")
    if not 1 <= t <= schedule.total_steps:
        raise ParameterError(f"noise prediction needs t in [1, {schedule.total_steps}], got {t}")

    alpha_bar = schedule.alpha_bar(t)
    c = np.sqrt(1.0 - alpha_bar)
    x = np.asarray(x_t, dtype=np.float64).reshape(-1)

    if is_unconditional(condition):
        term = _evaluate_mixture(x, alpha_bar, prior, c)
        return EpsilonLinearization(eps=c * term.ubar, eps_cond=None, eps_uncond=None, terms=(term,))

    restricted = prior.restrict(condition)
    if scale is None:
        term = _evaluate_mixture(x, alpha_bar, restricted, c)
        return EpsilonLinearization(eps=c * term.ubar, eps_cond=None, eps_uncond=None, terms=(term,))

    uncond = _evaluate_mixture(x, alpha_bar, prior, c * (1.0 - scale))
    cond = _evaluate_mixture(x, alpha_bar, restricted, c * scale)
    eps_u = c * uncond.ubar
    eps_c = c * cond.ubar
    return EpsilonLinearization(
        eps=eps_u + scale * (eps_c - eps_u),
        eps_cond=eps_c,
        eps_uncond=eps_u,
        terms=(uncond, cond),
    )


def analytic_epsilon(
    x_t: np.ndarray,
    t: int,
    prior: MixturePrior,
    condition: str | None,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Closed-form noise prediction for the (conditionally restricted) mixture.

    Raises:
        ConditionError: If the condition selects no component
    """
    return linearize_epsilon(x_t, t, prior, condition, None, schedule).eps.reshape(x_t.shape)


def guided_epsilon(
    x_t: np.ndarray,
    t: int,
    prior: MixturePrior,
    condition: str | None,
    scale: float,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Guided prediction eps_u + s * (eps_c - eps_u)."""
    if scale < 0:
        raise ParameterError(f"guidance scale must be >= 0, got {scale}")
    return linearize_epsilon(x_t, t, prior, condition, scale, schedule).eps.reshape(x_t.shape)


def marginal_log_density(
    x_t: np.ndarray,
    t: int,
    prior: MixturePrior,
    condition: str | None,
    schedule: NoiseSchedule,
) -> float:
    """log p_t(x_t) of the noised mixture, used as a score oracle."""
    mixture = prior.restrict(condition)
    alpha_bar = schedule.alpha_bar(t)
    x = np.asarray(x_t, dtype=np.float64).reshape(-1)
    n = x.size
    means = mixture.means.reshape(len(mixture.weights), n)
    v = alpha_bar * mixture.variances + (1.0 - alpha_bar)
    diff = x[None, :] - np.sqrt(alpha_bar) * means
    sq = np.einsum("kn,kn->k", diff, diff)
    logits = np.log(mixture.weights) - 0.5 * n * np.log(2.0 * np.pi * v) - 0.5 * sq / v
    return float(logsumexp(logits))
