"""Gradients of the watermark objective through the deterministic sampler.

Two reverse-mode paths are provided. `reference_gradient` walks back over a
recorded trajectory, so it keeps every state. `adjoint_gradient` keeps only
the current state, its adjoint and the detail gradient: each predecessor
state is rebuilt by inverting the DDIM update with Newton corrections.

The update x -> A x + B eps(x) is strictly monotone, hence invertible, when
the guidance scale lies in [0, 1]. Larger scales subtract the unconditional
prediction and a step can have several preimages, so Newton may land on the
wrong one. When the unwatermarked x_T is known the sweep checks the rebuilt
first state against it and, on a mismatch, replays the forward steps from
the initial latent instead. Replay costs O(N^2) steps and still holds a
constant number of buffers.
"""

import tracemalloc
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

import numpy as np

from .errors import DivergenceError, ParameterError, ShapeError, StateError
from .losses import l_init_grad
from .prior import EpsilonLinearization, MixturePrior
from .sampler import SamplerConfig, Trajectory, WatermarkHooks, ddim_step, predict_noise
from .schedule import NoiseSchedule, ddim_coefficients
from .watermark import embed_detail, embed_structure, invert_structure, structure_vjp

# relative step residual accepted as a converged inversion
NEWTON_TOLERANCE = 1e-6
# relative distance between the rebuilt and the known initial latent
START_TOLERANCE = 1e-6


class GradientMethod(Enum):
    """How a gradient was computed."""
    ADJOINT = "adjoint"
    REFERENCE = "reference"
    FINITE_DIFF = "finite_diff"


@dataclass(frozen=True)
class GradResult:
    """Gradient of a scalar loss w.r.t. both watermarks.

    Attributes:
        grad_ws: dL/dw_s
        grad_wd: dL/dw_d
        method: Path that produced the gradient
        retained_buffers: Grid-sized buffers a RetentionMeter saw kept across steps (0 when unmeasured)
        sampled_ws: Flat indices sampled by finite differences (None otherwise)
        sampled_wd: Flat indices sampled by finite differences (None otherwise)
        replayed: The adjoint sweep fell back to replaying forward steps
    """
    grad_ws: np.ndarray
    grad_wd: np.ndarray
    method: GradientMethod
    retained_buffers: int = 0
    sampled_ws: np.ndarray | None = None
    sampled_wd: np.ndarray | None = None
    replayed: bool = False

    def plus(self, extra_ws: np.ndarray, extra_wd: np.ndarray) -> "GradResult":
        """Adds direct (non-trajectory) gradient terms."""
        return replace(self, grad_ws=self.grad_ws + extra_ws, grad_wd=self.grad_wd + extra_wd)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.grad_ws.reshape(-1), self.grad_wd.reshape(-1)])


@dataclass
class AdjointState:
    """State carried by the backward sweep; grad_ws is filled in after the last step."""
    x: np.ndarray
    a: np.ndarray
    grad_wd: np.ndarray
    step: int
    grad_ws: np.ndarray | None = None


class RetentionMeter:
    """Traced memory kept alive across sampling steps, counted in grid-sized buffers.

    Use as a context manager around the code being measured; tracemalloc is
    started on entry unless it is already tracing. Gradient sweeps call mark()
    at every step boundary, once the step's temporaries are gone.
    """

    def __init__(self, grid_nbytes: int):
        if grid_nbytes <= 0:
            raise ParameterError(f"grid size in bytes must be positive, got {grid_nbytes}")
        self.grid_nbytes = grid_nbytes
        self.baseline = 0
        self.retained = 0
        self._owns_tracing = False

    def __enter__(self) -> "RetentionMeter":
        if not tracemalloc.is_tracing():
            tracemalloc.start()
            self._owns_tracing = True
        self.reset()
        return self

    def __exit__(self, *exc) -> None:
        if self._owns_tracing:
            tracemalloc.stop()
            self._owns_tracing = False

    def reset(self) -> None:
        """Starts counting from the memory traced right now."""
        self.baseline = tracemalloc.get_traced_memory()[0] if tracemalloc.is_tracing() else 0
        self.retained = 0

    def mark(self) -> None:
        if tracemalloc.is_tracing():
            current = tracemalloc.get_traced_memory()[0]
            self.retained = max(self.retained, current - self.baseline)

    @property
    def buffers(self) -> int:
        return int(self.retained // self.grid_nbytes)


def _measured(meter: RetentionMeter | None) -> int:
    return meter.buffers if meter is not None else 0


@dataclass(frozen=True)
class StepContext:
    """One sampling step as the gradient code sees it."""
    index: int
    t: int
    t_prev: int
    is_detail: bool
    a: float
    b: float


def step_contexts(config: SamplerConfig, hooks: WatermarkHooks, schedule: NoiseSchedule) -> list[StepContext]:
    """Step contexts in forward order."""
    detail_index = hooks.detail_index(config)
    contexts = []
    for i, t in enumerate(config.timesteps):
        t_prev = config.previous(i)
        is_detail = i == detail_index
        a, b = ddim_coefficients(schedule, t, t_prev, hooks.sigma_td if is_detail else 0.0)
        contexts.append(StepContext(i, t, t_prev, is_detail, a, b))
    return contexts


def _advance(
    x: np.ndarray,
    context: StepContext,
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    hooks: WatermarkHooks,
) -> np.ndarray:
    eps = predict_noise(x, context.t, prior, config, schedule).eps.reshape(x.shape)
    if context.is_detail:
        return embed_detail(x, eps, context.t, context.t_prev, hooks.detail, hooks.sigma_td, schedule)
    return ddim_step(x, eps, context.t, context.t_prev, 0.0, None, schedule)


def initial_state(x_T: np.ndarray, hooks: WatermarkHooks) -> np.ndarray:
    """State entering the first step: F_s(x_T, w_s), or x_T without a structure hook."""
    x = np.array(x_T, dtype=np.float64, copy=True)
    return embed_structure(x, hooks.structure) if hooks.structure is not None else x


def residual_f(
    x: np.ndarray,
    t: int,
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    hooks: WatermarkHooks | None = None,
) -> np.ndarray:
    """Increment x_{t_prev} - x_t of the sampler step at timestep t.

    Raises:
        ConfigError: If t is not on the sampling grid
    """
    hooks = hooks or WatermarkHooks()
    index = config.index_of(t)
    context = step_contexts(config, hooks, schedule)[index]
    return _advance(x, context, config, prior, schedule, hooks) - x


def _step_vjp(context: StepContext, linearization: EpsilonLinearization, a: np.ndarray) -> np.ndarray:
    flat = a.reshape(-1)
    return (context.a * flat + context.b * linearization.vjp(flat)).reshape(a.shape)


def _newton_invert(
    x_next: np.ndarray,
    context: StepContext,
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    hooks: WatermarkHooks,
    newton_steps: int,
) -> tuple[np.ndarray, EpsilonLinearization | None, float]:
    """Newton inversion of one step.

    Returns the rebuilt x_t, the noise linearization at it, and the step's
    relative residual there. With no Newton step, or a singular Newton system,
    the linearization is None and the residual inf.
    """
    offset = hooks.detail.reshape(-1) if context.is_detail else 0.0
    target = x_next.reshape(-1)
    eps_guess = predict_noise(x_next, context.t, prior, config, schedule).eps
    x = (target - context.b * eps_guess - offset) / context.a
    if newton_steps == 0:
        return x.reshape(x_next.shape), None, float("inf")

    lin = predict_noise(x.reshape(x_next.shape), context.t, prior, config, schedule)
    for _ in range(newton_steps):
        residual = context.a * x + context.b * lin.eps + offset - target
        diag, p, q = lin.low_rank_factors()
        beta = context.a + context.b * diag
        if beta == 0.0:
            return x.reshape(x_next.shape), None, float("inf")
        u = context.b * p
        small = beta * np.eye(u.shape[1]) + q.T @ u
        try:
            correction = (residual - u @ np.linalg.solve(small, q.T @ residual)) / beta
        except np.linalg.LinAlgError:
            return x.reshape(x_next.shape), None, float("inf")
        x = x - correction
        lin = predict_noise(x.reshape(x_next.shape), context.t, prior, config, schedule)

    residual = context.a * x + context.b * lin.eps + offset - target
    relative = float(np.linalg.norm(residual) / max(np.linalg.norm(target), 1.0))
    return x.reshape(x_next.shape), lin, relative


def invert_step(
    x_next: np.ndarray,
    context: StepContext,
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    hooks: WatermarkHooks,
    newton_steps: int = 2,
) -> np.ndarray:
    """Recovers x_t from x_{t_prev} = A x_t + B eps(x_t) (+ w_d).

    Starts from the fixed-point guess eps(x_t) ~ eps(x_{t_prev}) and applies
    Newton corrections. Each Newton system (beta I + B P Q^T) is solved with
    the Woodbury identity, so only n x 2K factors are formed. The preimage is
    unique only for guidance scales in [0, 1].
    """
    x, _, _ = _newton_invert(x_next, context, config, prior, schedule, hooks, newton_steps)
    return x


def _finish_structure(
    a: np.ndarray,
    x_t1: np.ndarray,
    hooks: WatermarkHooks,
    x_T: np.ndarray | None,
    init_weight: float,
) -> np.ndarray:
    """Routes dL/dx_{t1} (plus the l_init term) through F_s; returns dL/dw_s."""
    if hooks.structure is None:
        return np.zeros_like(x_t1)
    if x_T is None:
        x_T = invert_structure(x_t1, hooks.structure)
    if init_weight:
        a = a + init_weight * l_init_grad(x_t1, x_T)
    return structure_vjp(x_T, hooks.structure, a)


def _check_finite(a: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(a)):
        raise DivergenceError("adjoint became non-finite", step=step)


def _rebuilding_sweep(
    x_0: np.ndarray,
    cotangent: np.ndarray,
    contexts: list[StepContext],
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    hooks: WatermarkHooks,
    newton_steps: int,
    meter: RetentionMeter | None,
) -> tuple[AdjointState, int | None]:
    """Sweep that inverts every step.

    Also returns the grid index of the first step whose inversion did not
    converge or whose adjoint became non-finite (None when every step passed).
    """
    state = AdjointState(
        x=np.array(x_0, dtype=np.float64),
        a=np.array(cotangent, dtype=np.float64),
        grad_wd=np.zeros_like(x_0, dtype=np.float64),
        step=config.steps,
    )
    for context in reversed(contexts):
        state.step = context.index
        if context.is_detail:
            state.grad_wd = state.grad_wd + state.a
        state.x, lin, residual = _newton_invert(state.x, context, config, prior, schedule, hooks, newton_steps)
        if not residual <= NEWTON_TOLERANCE:
            return state, context.index
        state.a = _step_vjp(context, lin, state.a)
        del lin
        if not np.all(np.isfinite(state.a)):
            return state, context.index
        if meter is not None:
            meter.mark()
    return state, None


def _replaying_sweep(
    start: np.ndarray,
    cotangent: np.ndarray,
    contexts: list[StepContext],
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    hooks: WatermarkHooks,
    meter: RetentionMeter | None,
) -> AdjointState:
    """Sweep that recomputes each state forward from the initial latent."""
    state = AdjointState(
        x=start,
        a=np.array(cotangent, dtype=np.float64),
        grad_wd=np.zeros_like(start),
        step=config.steps,
    )
    for context in reversed(contexts):
        state.step = context.index
        if context.is_detail:
            state.grad_wd = state.grad_wd + state.a
        x = start
        for earlier in contexts[: context.index]:
            x = _advance(x, earlier, config, prior, schedule, hooks)
        lin = predict_noise(x, context.t, prior, config, schedule)
        del x
        state.a = _step_vjp(context, lin, state.a)
        del lin
        _check_finite(state.a, context.index)
        if meter is not None:
            meter.mark()
    return state


def _same_state(rebuilt: np.ndarray, known: np.ndarray) -> bool:
    return bool(np.linalg.norm(rebuilt - known) <= START_TOLERANCE * max(np.linalg.norm(known), 1.0))


def adjoint_gradient(
    x_0: np.ndarray,
    cotangent: np.ndarray,
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    hooks: WatermarkHooks,
    x_T: np.ndarray | None = None,
    init_weight: float = 0.0,
    newton_steps: int = 2,
    meter: RetentionMeter | None = None,
) -> GradResult:
    """Backward sweep with a constant number of retained latent buffers.

    Args:
        x_0: Sampler output
        cotangent: dL/dx_0
        config: Sampling grid and guidance used in the forward pass
        prior: Mixture prior
        schedule: Noise schedule
        hooks: Watermark hooks used in the forward pass
        x_T: Unwatermarked initial latent. When given, the rebuilt trajectory is
            checked against it and replayed forward on a mismatch; when omitted
            it is rebuilt by inverting F_s
        init_weight: Weight of the l_init term routed through F_s
        newton_steps: Newton corrections per reconstructed step
        meter: Optional RetentionMeter marked at every step boundary

    Returns:
        GradResult: Trajectory gradients (regularizers on w excluded)

    Raises:
        ShapeError: If the cotangent does not match x_0
        ParameterError: If newton_steps is negative
        DivergenceError: If the adjoint becomes non-finite, or a step cannot be
            inverted and x_T is not available for a replay
    """
    if cotangent.shape != x_0.shape:
        raise ShapeError(f"cotangent shape {cotangent.shape} does not match output shape {x_0.shape}")
    if newton_steps < 0:
        raise ParameterError(f"newton_steps must be >= 0, got {newton_steps}")
    contexts = step_contexts(config, hooks, schedule)
    state, failed = _rebuilding_sweep(x_0, cotangent, contexts, config, prior, schedule, hooks, newton_steps, meter)

    if x_T is None:
        if failed is not None:
            raise DivergenceError(
                "adjoint sweep could not rebuild the trajectory and x_T is not available for a replay", step=failed
            )
        replayed = False
    else:
        start = initial_state(x_T, hooks)
        replayed = failed is not None or not _same_state(state.x, start)
        if replayed:
            del state
            state = _replaying_sweep(start, cotangent, contexts, config, prior, schedule, hooks, meter)

    state.grad_ws = _finish_structure(state.a, state.x, hooks, x_T, init_weight)
    return GradResult(state.grad_ws, state.grad_wd, GradientMethod.ADJOINT, _measured(meter), replayed=replayed)


def reference_gradient(
    trajectory: Trajectory | None,
    cotangent: np.ndarray,
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    hooks: WatermarkHooks,
    x_T: np.ndarray | None = None,
    init_weight: float = 0.0,
    meter: RetentionMeter | None = None,
) -> GradResult:
    """Reverse mode over a recorded trajectory; memory grows with N.

    Raises:
        StateError: If no trajectory was recorded
        DivergenceError: If the adjoint becomes non-finite
    """
    if trajectory is None or trajectory.recorded_buffers != config.steps + 1:
        raise StateError("reference gradient needs a trajectory recorded over the full sampling grid")

    a = np.array(cotangent, dtype=np.float64)
    grad_wd = np.zeros_like(a)
    for context in reversed(step_contexts(config, hooks, schedule)):
        if context.is_detail:
            grad_wd = grad_wd + a
        lin = predict_noise(trajectory.states[context.index], context.t, prior, config, schedule)
        a = _step_vjp(context, lin, a)
        del lin
        _check_finite(a, context.index)
        if meter is not None:
            meter.mark()

    grad_ws = _finish_structure(a, trajectory.states[0], hooks, x_T, init_weight)
    return GradResult(grad_ws, grad_wd, GradientMethod.REFERENCE, _measured(meter))


def finite_diff_gradient(
    loss: Callable[[np.ndarray, np.ndarray], float],
    w_s: np.ndarray,
    w_d: np.ndarray,
    h: float = 1e-5,
    coordinates: int = 64,
    seed: int = 0,
) -> GradResult:
    """Central differences on a random subset of coordinates of each watermark.

    Unsampled coordinates are left at zero; the sampled flat indices are returned.

    Raises:
        ParameterError: If h <= 0 or coordinates < 1
    """
    if h <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    if coordinates < 1:
        raise ParameterError(f"need at least one sampled coordinate, got {coordinates}")
    rng = np.random.default_rng(seed)
    grads, picks = [], []
    for which, w in enumerate((w_s, w_d)):
        count = min(coordinates, w.size)
        index = np.sort(rng.choice(w.size, size=count, replace=False))
        grad = np.zeros(w.size)
        for k in index:
            bump = np.zeros(w.size)
            bump[k] = h
            bump = bump.reshape(w.shape)
            if which == 0:
                up, down = loss(w_s + bump, w_d), loss(w_s - bump, w_d)
            else:
                up, down = loss(w_s, w_d + bump), loss(w_s, w_d - bump)
            grad[k] = (up - down) / (2.0 * h)
        grads.append(grad.reshape(w.shape))
        picks.append(index)
    return GradResult(grads[0], grads[1], GradientMethod.FINITE_DIFF, 0, picks[0], picks[1])


def gradient_agreement(reference: np.ndarray, candidate: np.ndarray) -> tuple[float, float]:
    """Returns (cosine similarity, relative L2 error) of candidate against reference."""
    ref, cand = reference.reshape(-1), candidate.reshape(-1)
    ref_norm, cand_norm = np.linalg.norm(ref), np.linalg.norm(cand)
    if ref_norm == 0.0:
        return (1.0, 0.0) if cand_norm == 0.0 else (0.0, float("inf"))
    cosine = float(ref @ cand / (ref_norm * cand_norm)) if cand_norm > 0 else 0.0
    return cosine, float(np.linalg.norm(cand - ref) / ref_norm)
