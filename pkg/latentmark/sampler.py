"""Deterministic DDIM sampler with watermark hooks."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError, StateError
from .prior import EpsilonLinearization, MixturePrior, is_unconditional, linearize_epsilon
from .schedule import NoiseSchedule, ddim_coefficients, make_timesteps
from .watermark import embed_detail, embed_structure


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling grid and guidance settings.

    sigma_t is zero on every step; only an active detail hook overrides it.

    Attributes:
        timesteps: Strictly decreasing timesteps t_1 > ... > t_N, all >= 1
        guidance_scale: Guidance scale s (ignored when unconditional)
        condition: Condition label or None / "unconditional"
    """
    timesteps: tuple[int, ...]
    guidance_scale: float = 0.0
    condition: str | None = None

    def __post_init__(self):
        steps = tuple(int(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", steps)
        if not steps:
            raise ConfigError("sampler needs at least one timestep")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ConfigError(f"timesteps must be strictly decreasing, got {list(steps)}")
        if steps[-1] < 1:
            raise ConfigError("timesteps must be >= 1")
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance_scale must be >= 0, got {self.guidance_scale}")

    @classmethod
    def from_steps(
        cls,
        total_steps: int,
        inference_steps: int,
        guidance_scale: float = 0.0,
        condition: str | None = None,
    ) -> "SamplerConfig":
        """Builds the evenly strided grid ending at t = 1."""
        return cls(tuple(make_timesteps(total_steps, inference_steps)), guidance_scale, condition)

    @property
    def steps(self) -> int:
        return len(self.timesteps)

    @property
    def conditional(self) -> bool:
        return not is_unconditional(self.condition)

    def previous(self, index: int) -> int:
        """Timestep reached by step `index` (0 after the last step)."""
        return self.timesteps[index + 1] if index + 1 < len(self.timesteps) else 0

    def index_of(self, t: int) -> int:
        """Position of t on the grid.

        Raises:
            ConfigError: If t is not on the grid
        """
        try:
            return self.timesteps.index(int(t))
        except ValueError:
            raise ConfigError(f"timestep {t} is not on the sampling grid {list(self.timesteps)}") from None

    def unconditional(self) -> "SamplerConfig":
        """Same grid without conditioning."""
        return SamplerConfig(self.timesteps, 0.0, None)


@dataclass(frozen=True)
class WatermarkHooks:
    """Watermark injection points for one sampling run.

    Attributes:
        structure: w_s applied to the first state, or None
        detail: w_d injected at detail_step, or None
        detail_step: Timestep t_d of the detail injection
        sigma_td: sigma used in the detail step's eps coefficient
    """
    structure: np.ndarray | None = None
    detail: np.ndarray | None = None
    detail_step: int | None = None
    sigma_td: float = 0.1

    def detail_index(self, config: SamplerConfig) -> int | None:
        """Grid index of the detail step, validating it against the sampler.

        Raises:
            ConfigError: If the detail step is missing, off-grid or the first step
        """
        if self.detail is None:
            return None
        if self.detail_step is None:
            raise ConfigError("a detail watermark needs a detail_step")
        index = config.index_of(self.detail_step)
        if index == 0:
            raise ConfigError("detail step must come after the structure step")
        return index


@dataclass
class Trajectory:
    """Recorded sampling run.

    states[i] is the latent entering step i (timesteps[i]); the final entry is
    x_0 at t = 0, so len(states) == len(timesteps) == N + 1.
    """
    timesteps: list[int] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    eps: list[np.ndarray] = field(default_factory=list)
    eps_cond: list[np.ndarray | None] = field(default_factory=list)
    eps_uncond: list[np.ndarray | None] = field(default_factory=list)
    conditional: bool = False

    @property
    def entries(self) -> list[tuple[int, np.ndarray]]:
        return list(zip(self.timesteps, self.states))

    @property
    def recorded_buffers(self) -> int:
        """Number of latent-sized state buffers held by this trajectory."""
        return len(self.states)


def predict_noise(
    x_t: np.ndarray,
    t: int,
    prior: MixturePrior,
    config: SamplerConfig,
    schedule: NoiseSchedule,
) -> EpsilonLinearization:
    """Noise prediction the sampler uses at (x_t, t): guided when conditional."""
    scale = config.guidance_scale if config.conditional else None
    return linearize_epsilon(x_t, t, prior, config.condition, scale, schedule)


def ddim_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    sigma_t: float,
    injected_noise: np.ndarray | None,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One DDIM update.

    Returns sqrt(ab_prev) * pred_x0 + sqrt(1 - ab_prev - sigma^2) * eps_hat + sigma * noise,
    with the last term omitted when sigma = 0.

    Raises:
        ScheduleError: If the radicand is negative
        ParameterError: If sigma > 0 and no noise is provided
    """
    if eps_hat.shape != x_t.shape:
        raise ShapeError(f"eps shape {eps_hat.shape} does not match latent shape {x_t.shape}")
    a, b = ddim_coefficients(schedule, t, t_prev, sigma_t)
    out = a * x_t + b * eps_hat
    if sigma_t > 0:
        if injected_noise is None:
            raise ParameterError("sigma_t > 0 needs injected noise")
        out = out + sigma_t * injected_noise
    return out


def sample(
    x_T: np.ndarray,
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    hooks: WatermarkHooks | None = None,
    record: bool = False,
) -> tuple[np.ndarray, Trajectory | None]:
    """Runs N DDIM steps from x_T.

    The structure hook is applied to the state before the first noise prediction;
    the detail hook replaces the update at its timestep.

    Args:
        x_T: Initial latent
        config: Sampling grid and guidance
        prior: Mixture prior
        schedule: Noise schedule
        hooks: Optional watermark hooks
        record: Keep every state and noise prediction

    Returns:
        tuple: (x_0, Trajectory or None)

    Raises:
        ShapeError: If x_T does not match the prior
        ConfigError: If the detail hook's timestep is not on the grid
    """
    if x_T.shape != prior.shape:
        raise ShapeError(f"x_T shape {x_T.shape} does not match prior shape {prior.shape}")
    hooks = hooks or WatermarkHooks()
    detail_index = hooks.detail_index(config)

    x = np.array(x_T, dtype=np.float64, copy=True)
    if hooks.structure is not None:
        x = embed_structure(x, hooks.structure)

    trajectory = Trajectory(conditional=config.conditional) if record else None
    for i, t in enumerate(config.timesteps):
        t_prev = config.previous(i)
        prediction = predict_noise(x, t, prior, config, schedule)
        eps = prediction.eps.reshape(x.shape)

        if trajectory is not None:
            trajectory.timesteps.append(t)
            trajectory.states.append(x)
            trajectory.eps.append(eps)
            trajectory.eps_cond.append(_grid_or_none(prediction.eps_cond, x.shape))
            trajectory.eps_uncond.append(_grid_or_none(prediction.eps_uncond, x.shape))

        if i == detail_index:
            x = embed_detail(x, eps, t, t_prev, hooks.detail, hooks.sigma_td, schedule)
        else:
            x = ddim_step(x, eps, t, t_prev, 0.0, None, schedule)

    if trajectory is not None:
        trajectory.timesteps.append(0)
        trajectory.states.append(x)
    return x, trajectory


def _grid_or_none(values: np.ndarray | None, shape: tuple[int, ...]) -> np.ndarray | None:
    return None if values is None else values.reshape(shape)


def guidance_profile(trajectory: Trajectory, scale: float) -> list[tuple[int, float]]:
    """Mean absolute guidance noise |s * (eps_c - eps_u)| per recorded step.

    Raises:
        StateError: If the trajectory was sampled without conditioning
    """
    if not trajectory.conditional or any(e is None for e in trajectory.eps_cond):
        raise StateError("guidance profile needs a trajectory recorded with conditional sampling")
    return [
        (t, float(np.mean(np.abs(scale * (cond - uncond)))))
        for t, cond, uncond in zip(trajectory.timesteps, trajectory.eps_cond, trajectory.eps_uncond)
    ]


def sample_corpus(
    count: int,
    config: SamplerConfig,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    seed: int,
) -> np.ndarray:
    """Samples `count` unwatermarked outputs from fresh standard-normal x_T.

    Returns:
        np.ndarray: Array of shape (count, C, H, W)
    """
    if count < 0:
        raise ParameterError(f"corpus size must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    outputs = np.empty((count, *prior.shape))
    for i in range(count):
        outputs[i], _ = sample(rng.standard_normal(prior.shape), config, prior, schedule)
    return outputs
