"""Watermark optimization: the objective, Adam updates and the gradient check."""

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import run_logger
from .adjoint import (
    GradResult,
    RetentionMeter,
    adjoint_gradient,
    finite_diff_gradient,
    gradient_agreement,
    initial_state,
    reference_gradient,
)
from .carriers import CarrierSet, Message, decode, embed_image, embed_image_vjp, msg_loss, msg_loss_grad
from .config import AblationMode, GradientMode, OptimizerConfig
from .detection import bit_accuracy
from .errors import DivergenceError, ParameterError
from .extractor import FeatureExtractor
from .losses import LossBreakdown, LossWeights, l_high, l_high_grad, l_init, l_low, l_low_grad, total_loss
from .prior import MixturePrior
from .sampler import SamplerConfig, Trajectory, WatermarkHooks, sample
from .schedule import NoiseSchedule
from .watermark import WatermarkPair


@dataclass
class Evaluation:
    """Forward pass of the objective at one watermark pair."""
    breakdown: LossBreakdown
    x_0: np.ndarray
    x_start: np.ndarray
    embedding: np.ndarray
    decoded: Message
    bit_accuracy: float
    trajectory: Trajectory | None = None


@dataclass
class WatermarkObjective:
    """Everything the loss depends on apart from the watermarks themselves.

    Attributes:
        x_T: Unwatermarked initial latent
        message: Target message
        sampler: Sampling grid and guidance
        prior: Mixture prior
        schedule: Noise schedule
        extractor: Fixed feature extractor
        carriers: Whitened carriers
        weights: Loss weights
        initial: Watermarks at initialization (for l_low)
        detail_step: Timestep of the detail injection
        margin: Hinge margin
        mode: Which watermarks are active
        newton_steps: Newton corrections per inverted step in the adjoint sweep
    """
    x_T: np.ndarray
    message: Message
    sampler: SamplerConfig
    prior: MixturePrior
    schedule: NoiseSchedule
    extractor: FeatureExtractor
    carriers: CarrierSet
    weights: LossWeights
    initial: WatermarkPair
    detail_step: int
    margin: float = 1.0
    mode: AblationMode = AblationMode.DUAL
    newton_steps: int = 2

    def hooks(self, pair: WatermarkPair) -> WatermarkHooks:
        return WatermarkHooks(
            structure=pair.w_s if self.mode.uses_structure else None,
            detail=pair.w_d if self.mode.uses_detail else None,
            detail_step=self.detail_step if self.mode.uses_detail else None,
            sigma_td=pair.sigma_td,
        )

    def evaluate(self, pair: WatermarkPair, record: bool = False) -> Evaluation:
        """Runs the sampler with the watermarks and scores the output."""
        hooks = self.hooks(pair)
        x_0, trajectory = sample(self.x_T, self.sampler, self.prior, self.schedule, hooks, record)
        x_start = initial_state(self.x_T, hooks)
        embedding = embed_image(x_0, self.extractor, self.carriers)
        decoded = decode(embedding, self.carriers)
        breakdown = total_loss(
            msg=msg_loss(embedding, self.carriers, self.message, self.margin),
            init=l_init(x_start, self.x_T),
            low=l_low(pair.w_s, pair.w_d, self.initial.w_s, self.initial.w_d),
            high=l_high(pair.w_s, pair.w_d),
            weights=self.weights,
        )
        return Evaluation(
            breakdown=breakdown,
            x_0=x_0,
            x_start=x_start,
            embedding=embedding,
            decoded=decoded,
            bit_accuracy=bit_accuracy(self.message, decoded),
            trajectory=trajectory,
        )

    def loss_value(self, w_s: np.ndarray, w_d: np.ndarray) -> float:
        """Total loss at (w_s, w_d); used by finite differences."""
        return self.evaluate(self.initial.with_values(w_s, w_d)).breakdown.total

    def gradient(
        self,
        pair: WatermarkPair,
        method: GradientMode = GradientMode.ADJOINT,
        meter: RetentionMeter | None = None,
    ) -> tuple[Evaluation, GradResult]:
        """Total-loss gradient, trajectory terms plus direct regularizer terms.

        Inactive watermarks get a zero gradient. A meter, when given, is reset
        where each path starts holding memory of its own: before the recorded
        forward pass for the reference path, after the plain forward pass for
        the adjoint.
        """
        reference = method is GradientMode.REFERENCE
        if meter is not None and reference:
            meter.reset()
        evaluation = self.evaluate(pair, record=reference)
        hooks = self.hooks(pair)
        cotangent = self.weights.msg * embed_image_vjp(
            evaluation.x_0,
            self.extractor,
            self.carriers,
            msg_loss_grad(evaluation.embedding, self.carriers, self.message, self.margin),
        )
        if reference:
            grads = reference_gradient(
                evaluation.trajectory, cotangent, self.sampler, self.prior, self.schedule, hooks,
                x_T=self.x_T, init_weight=self.weights.init, meter=meter,
            )
        else:
            if meter is not None:
                meter.reset()
            grads = adjoint_gradient(
                evaluation.x_0, cotangent, self.sampler, self.prior, self.schedule, hooks,
                x_T=self.x_T, init_weight=self.weights.init, newton_steps=self.newton_steps, meter=meter,
            )

        low_s, low_d = l_low_grad(pair.w_s, pair.w_d, self.initial.w_s, self.initial.w_d)
        high_s, high_d = l_high_grad(pair.w_s, pair.w_d)
        grads = grads.plus(
            self.weights.low * low_s + self.weights.high * high_s,
            self.weights.low * low_d + self.weights.high * high_d,
        )
        if not self.mode.uses_structure:
            grads = replace(grads, grad_ws=np.zeros_like(grads.grad_ws))
        if not self.mode.uses_detail:
            grads = replace(grads, grad_wd=np.zeros_like(grads.grad_wd))
        return evaluation, grads


@dataclass
class AdamState:
    """Adam moments for both watermarks."""
    m_s: np.ndarray
    v_s: np.ndarray
    m_d: np.ndarray
    v_d: np.ndarray
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_pair(cls, pair: WatermarkPair, settings: OptimizerConfig) -> "AdamState":
        zeros = np.zeros(pair.shape)
        return cls(
            m_s=zeros.copy(), v_s=zeros.copy(), m_d=zeros.copy(), v_d=zeros.copy(),
            learning_rate=settings.learning_rate, beta1=settings.beta1,
            beta2=settings.beta2, eps=settings.eps,
        )

    def _update(self, w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray) -> np.ndarray:
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** self.step_count)
        v_hat = v / (1.0 - self.beta2 ** self.step_count)
        return w - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, pair: WatermarkPair, grads: GradResult) -> WatermarkPair:
        """One Adam update on both watermarks."""
        self.step_count += 1
        w_s = self._update(pair.w_s, grads.grad_ws, self.m_s, self.v_s)
        w_d = self._update(pair.w_d, grads.grad_wd, self.m_d, self.v_d)
        return pair.with_values(w_s, w_d)


@dataclass(frozen=True)
class HistoryRow:
    """One optimization iteration."""
    iteration: int
    msg: float
    init: float
    low: float
    high: float
    total: float
    bit_accuracy: float

    @classmethod
    def from_evaluation(cls, iteration: int, evaluation: Evaluation) -> "HistoryRow":
        b = evaluation.breakdown
        return cls(iteration, b.msg, b.init, b.low, b.high, b.total, evaluation.bit_accuracy)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class OptimizationResult:
    """Outcome of one watermark optimization."""
    pair: WatermarkPair
    x_0: np.ndarray
    history: list[HistoryRow] = field(default_factory=list)
    iterations: int = 0
    early_stopped: bool = False
    bit_accuracy: float = 0.0


def optimize_watermark(
    objective: WatermarkObjective,
    settings: OptimizerConfig,
    image: int = 0,
    verbose: bool = False,
) -> OptimizationResult:
    """Adam on (w_s, w_d) starting from objective.initial.

    Stops at the iteration budget or once the message loss has been zero for
    `settings.patience` consecutive iterations.

    Args:
        objective: Loss definition and initial watermarks
        settings: Optimizer settings
        image: Image index used in log lines
        verbose: Log progress to the console

    Returns:
        OptimizationResult: Final watermarks, watermarked output and history

    Raises:
        DivergenceError: If the loss or gradient becomes non-finite; carries the history so far
    """
    if settings.iterations < 0:
        raise ParameterError(f"iteration budget must be >= 0, got {settings.iterations}")
    pair = objective.initial
    adam = AdamState.for_pair(pair, settings)
    method = GradientMode(settings.gradient_method)
    history: list[HistoryRow] = []
    zero_streak = 0

    for iteration in range(settings.iterations):
        try:
            evaluation, grads = objective.gradient(pair, method)
        except DivergenceError as e:
            raise DivergenceError(f"gradient diverged: {e}", step=iteration, history=history) from e
        row = HistoryRow.from_evaluation(iteration, evaluation)
        history.append(row)
        if not np.isfinite(row.total) or not np.all(np.isfinite(grads.flat())):
            raise DivergenceError("non-finite loss or gradient", step=iteration, history=history)
        if verbose and settings.log_every and iteration % settings.log_every == 0:
            run_logger.log_iteration(image, iteration, evaluation.breakdown, evaluation.bit_accuracy)

        zero_streak = zero_streak + 1 if row.msg == 0.0 else 0
        if zero_streak >= settings.patience:
            if verbose:
                run_logger.log_early_stop(image, iteration)
            final = objective.evaluate(pair)
            return OptimizationResult(pair, final.x_0, history, iteration + 1, True, final.bit_accuracy)

        pair = adam.step(pair, grads)

    final = objective.evaluate(pair)
    return OptimizationResult(pair, final.x_0, history, settings.iterations, False, final.bit_accuracy)


@dataclass(frozen=True)
class GradcheckReport:
    """Agreement between the three gradient paths."""
    adjoint_vs_reference_cosine: float
    adjoint_vs_reference_rel_l2: float
    reference_vs_fd_rel_error: float
    coordinates: int
    adjoint_buffers: int
    reference_buffers: int
    steps: int

    def passed(self, cosine: float = 0.999, rel_l2: float = 1e-3, fd_error: float = 1e-4) -> bool:
        return (
            self.adjoint_vs_reference_cosine >= cosine
            and self.adjoint_vs_reference_rel_l2 <= rel_l2
            and self.reference_vs_fd_rel_error <= fd_error
        )

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def run_gradcheck(
    objective: WatermarkObjective,
    pair: WatermarkPair | None = None,
    h: float = 1e-5,
    coordinates: int = 64,
    seed: int = 0,
) -> GradcheckReport:
    """Compares adjoint, reference and finite-difference gradients at one point.

    Retained-buffer counts come from tracemalloc, measured separately for each path.
    """
    pair = pair or objective.initial
    grid_nbytes = objective.x_T.astype(np.float64).nbytes
    with RetentionMeter(grid_nbytes) as meter:
        _, adjoint = objective.gradient(pair, GradientMode.ADJOINT, meter)
    with RetentionMeter(grid_nbytes) as meter:
        _, reference = objective.gradient(pair, GradientMode.REFERENCE, meter)
    cosine, rel_l2 = gradient_agreement(reference.flat(), adjoint.flat())

    fd = finite_diff_gradient(objective.loss_value, pair.w_s, pair.w_d, h=h, coordinates=coordinates, seed=seed)
    ref_sampled = np.concatenate(
        [reference.grad_ws.reshape(-1)[fd.sampled_ws], reference.grad_wd.reshape(-1)[fd.sampled_wd]]
    )
    fd_sampled = np.concatenate([fd.grad_ws.reshape(-1)[fd.sampled_ws], fd.grad_wd.reshape(-1)[fd.sampled_wd]])
    scale = max(float(np.linalg.norm(ref_sampled)), 1e-300)
    return GradcheckReport(
        adjoint_vs_reference_cosine=cosine,
        adjoint_vs_reference_rel_l2=rel_l2,
        reference_vs_fd_rel_error=float(np.linalg.norm(fd_sampled - ref_sampled) / scale),
        coordinates=int(len(fd.sampled_ws) + len(fd.sampled_wd)),
        adjoint_buffers=adjoint.retained_buffers,
        reference_buffers=reference.retained_buffers,
        steps=objective.sampler.steps,
    )
