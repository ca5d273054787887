"""Experiment orchestration: calibration, per-image optimization, attacks and aggregation."""

import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn

from . import run_logger
from .attacks import AttackSpec, RegenerationContext, apply_attack, is_applicable
from .carriers import CarrierSet, calibrate_carriers, decode, embed_image, random_message
from .config import AblationMode, ExperimentConfig, config_to_dict, validate_config, with_detail_step, with_mode
from .detection import detection_threshold, matched_bits, tpr_at_fpr
from .errors import ConfigError, ExperimentAbortedError, LatentMarkError, ReportError
from .extractor import FeatureExtractor, build_extractor
from .optimizer import HistoryRow, OptimizationResult, WatermarkObjective, optimize_watermark
from .prior import MixturePrior, make_prior
from .sampler import SamplerConfig, guidance_profile, sample, sample_corpus
from .schedule import NoiseSchedule, build_schedule
from .storage import config_digest
from .watermark import EmbedConfig, WatermarkPair, init_watermarks

FAILURE_LIMIT = 0.5


def derive_seed(master: int, stream: str, index: int = 0) -> int:
    """Seed for one named random stream of one image."""
    sequence = np.random.SeedSequence([int(master), zlib.crc32(stream.encode("utf-8")), int(index)])
    return int(sequence.generate_state(1)[0])


@dataclass(frozen=True)
class Pipeline:
    """Fixed components shared by every image of a run."""
    schedule: NoiseSchedule
    prior: MixturePrior
    sampler: SamplerConfig
    extractor: FeatureExtractor
    carriers: CarrierSet

    @property
    def regeneration(self) -> RegenerationContext:
        return RegenerationContext(self.prior, self.schedule, self.sampler)


def build_components(config: ExperimentConfig) -> tuple[NoiseSchedule, MixturePrior, SamplerConfig]:
    """Schedule, prior and sampler grid described by a configuration."""
    schedule = build_schedule(
        config.schedule.total_steps, config.schedule.beta_start, config.schedule.beta_end, config.schedule.kind
    )
    prior = make_prior(
        config.grid.shape,
        components=config.prior.components,
        variance=config.prior.variance,
        mean_scale=config.prior.mean_scale,
        smoothing=config.prior.mean_smoothing,
        labels=config.prior.labels,
        weights=config.prior.weights,
        seed=config.prior.seed,
    )
    sampler = SamplerConfig.from_steps(
        config.schedule.total_steps,
        config.sampler.inference_steps,
        config.sampler.guidance_scale,
        config.sampler.condition,
    )
    return schedule, prior, sampler


def build_pipeline(
    config: ExperimentConfig,
    extractor: FeatureExtractor | None = None,
    carriers: CarrierSet | None = None,
) -> Pipeline:
    """Builds the run's fixed components, calibrating carriers unless given.

    Carriers are fitted on an unconditionally sampled, unwatermarked corpus.
    """
    schedule, prior, sampler = build_components(config)
    if extractor is None:
        extractor = build_extractor(
            config.grid.shape, config.codec.hidden_dim, config.codec.feature_dim, config.codec.extractor_seed
        )
    if carriers is None:
        corpus = sample_corpus(
            config.codec.corpus_size, sampler.unconditional(), prior, schedule,
            derive_seed(config.seed, "corpus"),
        )
        carriers = calibrate_carriers(corpus, extractor, config.codec.bits, config.codec.carrier_seed)
    return Pipeline(schedule, prior, sampler, extractor, carriers)


@dataclass
class ImageResult:
    """Outcome for one image.

    The arrays are kept in memory for artifact writing and are left out of reports.
    """
    index: int
    status: str
    error: str | None = None
    message: str = ""
    counts: dict[str, int] = field(default_factory=dict)
    iterations: int = 0
    early_stopped: bool = False
    clean_bit_accuracy: float = 0.0
    psnr: float | None = None
    mse: float | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    history: list[HistoryRow] = field(default_factory=list, repr=False, compare=False)
    watermarks: WatermarkPair | None = field(default=None, repr=False, compare=False)
    latent: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "status": self.status,
            "error": self.error,
            "message": self.message,
            "counts": dict(self.counts),
            "iterations": self.iterations,
            "early_stopped": self.early_stopped,
            "clean_bit_accuracy": self.clean_bit_accuracy,
            "psnr": self.psnr,
            "mse": self.mse,
            "seeds": dict(self.seeds),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ImageResult":
        return cls(
            index=int(data["index"]),
            status=data["status"],
            error=data.get("error"),
            message=data.get("message", ""),
            counts={k: int(v) for k, v in data.get("counts", {}).items()},
            iterations=int(data.get("iterations", 0)),
            early_stopped=bool(data.get("early_stopped", False)),
            clean_bit_accuracy=float(data.get("clean_bit_accuracy", 0.0)),
            psnr=data.get("psnr"),
            mse=data.get("mse"),
            seeds={k: int(v) for k, v in data.get("seeds", {}).items()},
        )


@dataclass(frozen=True)
class AttackSummary:
    """Aggregate over images for one attack."""
    name: str
    category: str
    mean_bit_accuracy: float
    tpr: float
    threshold: int
    images: int


@dataclass
class RobustnessReport:
    """Per-attack aggregates plus per-image detail for one run."""
    bits: int
    fpr: float
    threshold: int
    mode: str
    detail_step: int
    attacks: list[AttackSummary]
    images: list[ImageResult]
    config_digest: str
    wall_time: float = 0.0

    def summary(self, name: str) -> AttackSummary:
        for item in self.attacks:
            if item.name == name:
                return item
        raise KeyError(name)

    def category_means(self) -> dict[str, float]:
        """Mean bit accuracy per attack category, excluding the clean row."""
        groups: dict[str, list[float]] = {}
        for item in self.attacks:
            if item.category != "none":
                groups.setdefault(item.category, []).append(item.mean_bit_accuracy)
        return {category: float(np.mean(values)) for category, values in groups.items()}

    def average_over_attacks(self) -> float:
        """Mean bit accuracy over every non-clean attack."""
        values = [item.mean_bit_accuracy for item in self.attacks if item.category != "none"]
        return float(np.mean(values)) if values else float("nan")

    @property
    def failures(self) -> int:
        return sum(1 for image in self.images if not image.ok)


def _psnr(reference: np.ndarray, candidate: np.ndarray) -> tuple[float | None, float]:
    mse = float(np.mean((reference - candidate) ** 2))
    peak = float(reference.max() - reference.min())
    if mse == 0.0 or peak == 0.0:
        return None, mse
    return float(10.0 * np.log10(peak * peak / mse)), mse


def make_objective(
    config: ExperimentConfig,
    pipeline: Pipeline,
    index: int,
) -> tuple[WatermarkObjective, dict[str, int]]:
    """Objective for image `index`, with every random stream derived from the master seed."""
    seeds = {
        name: derive_seed(config.seed, name, index) for name in ("latent", "message", "watermark")
    }
    injection = EmbedConfig.for_grid(pipeline.sampler.timesteps, config.sampler.detail_step)
    x_T = np.random.default_rng(seeds["latent"]).standard_normal(config.grid.shape)
    initial = init_watermarks(
        config.grid.shape, config.optimizer.init_variance, seeds["watermark"], config.sampler.sigma_td
    )
    objective = WatermarkObjective(
        x_T=x_T,
        message=random_message(config.codec.bits, seeds["message"]),
        sampler=pipeline.sampler,
        prior=pipeline.prior,
        schedule=pipeline.schedule,
        extractor=pipeline.extractor,
        carriers=pipeline.carriers,
        weights=config.weights,
        initial=initial,
        detail_step=injection.t_d,
        margin=config.codec.margin,
        mode=config.optimizer.mode,
        newton_steps=config.optimizer.inversion_newton_steps,
    )
    return objective, seeds


def attack_seed(spec: AttackSpec, index: int) -> AttackSpec:
    """The attack as applied to image `index` (stochastic kinds get a per-image seed)."""
    return replace(spec, seed=derive_seed(spec.seed, "attack", index))


def attack_labels(attacks: Sequence[AttackSpec]) -> list[str]:
    """Report labels, one per attack, unique within the list.

    The label is the attack name with its parameters. Entries sharing a name get
    their seed appended, then their position if they are still equal.
    """
    names = [spec.name for spec in attacks]
    labels = [
        f"{name}[seed={spec.seed}]" if names.count(name) > 1 else name
        for name, spec in zip(names, attacks)
    ]
    return [
        f"{label}#{position}" if labels.count(label) > 1 else label
        for position, label in enumerate(labels)
    ]


def run_image(
    index: int,
    config: ExperimentConfig,
    pipeline: Pipeline,
    attacks: Sequence[AttackSpec],
    verbose: bool = False,
) -> ImageResult:
    """Optimizes, attacks and decodes one image."""
    objective, seeds = make_objective(config, pipeline, index)
    result: OptimizationResult = optimize_watermark(objective, config.optimizer, image=index, verbose=verbose)
    clean, _ = sample(objective.x_T, pipeline.sampler, pipeline.prior, pipeline.schedule)
    psnr, mse = _psnr(clean, result.x_0)

    counts = {}
    for label, spec in zip(attack_labels(attacks), attacks):
        attacked = apply_attack(result.x_0, attack_seed(spec, index), pipeline.regeneration)
        decoded = decode(embed_image(attacked, pipeline.extractor, pipeline.carriers), pipeline.carriers)
        counts[label] = matched_bits(objective.message, decoded)

    return ImageResult(
        index=index,
        status="ok",
        message=objective.message.to_string(),
        counts=counts,
        iterations=result.iterations,
        early_stopped=result.early_stopped,
        clean_bit_accuracy=result.bit_accuracy,
        psnr=psnr,
        mse=mse,
        seeds=seeds,
        history=result.history,
        watermarks=result.pair,
        latent=result.x_0,
    )


def _guarded_image(
    index: int,
    config: ExperimentConfig,
    pipeline: Pipeline,
    attacks: Sequence[AttackSpec],
    verbose: bool,
) -> ImageResult:
    try:
        return run_image(index, config, pipeline, attacks, verbose)
    except LatentMarkError as e:
        return ImageResult(index=index, status="failed", error=f"{type(e).__name__}: {e}")


def applicable_attacks(config: ExperimentConfig, verbose: bool = False) -> list[AttackSpec]:
    """Attacks that apply to the configured grid; others are skipped with a warning."""
    kept = []
    for spec in config.attacks:
        if is_applicable(spec, config.grid.shape):
            kept.append(spec)
        elif verbose:
            run_logger.log_warning(f"skipping {spec.name}: needs a three-channel grid")
    return kept


def summarize(
    config: ExperimentConfig,
    attacks: Sequence[AttackSpec],
    images: list[ImageResult],
    wall_time: float = 0.0,
) -> RobustnessReport:
    """Aggregates per-image counts into per-attack accuracy and TPR rows."""
    k, fpr = config.codec.bits, config.codec.fpr
    threshold = detection_threshold(k, fpr)
    succeeded = [image for image in images if image.ok]
    summaries = []
    for label, spec in zip(attack_labels(attacks), attacks):
        counts = [image.counts[label] for image in succeeded]
        summaries.append(
            AttackSummary(
                name=label,
                category=spec.category.value,
                mean_bit_accuracy=float(np.mean(counts) / k) if counts else float("nan"),
                tpr=tpr_at_fpr(counts, k, fpr) if counts else float("nan"),
                threshold=threshold,
                images=len(counts),
            )
        )
    return RobustnessReport(
        bits=k,
        fpr=fpr,
        threshold=threshold,
        mode=config.optimizer.mode.value,
        detail_step=config.sampler.detail_step,
        attacks=summaries,
        images=sorted(images, key=lambda image: image.index),
        config_digest=config_digest(config_to_dict(config)),
        wall_time=wall_time,
    )


def run_experiment(
    config: ExperimentConfig,
    pipeline: Pipeline | None = None,
    verbose: bool = False,
) -> RobustnessReport:
    """Full evaluation: optimize every image, attack, decode and aggregate.

    Failing images are recorded and the run continues until half of them fail.

    Raises:
        ConfigError: If the configuration is invalid
        ReportError: If the configuration asks for zero images
        ExperimentAbortedError: If at least half of the images fail
    """
    problems = validate_config(config)
    if problems:
        raise ConfigError("; ".join(problems))
    if config.images == 0:
        raise ReportError("configuration requests zero images; nothing to report")

    started = time.perf_counter()
    pipeline = pipeline or build_pipeline(config)
    attacks = applicable_attacks(config, verbose)
    indices = list(range(config.images))

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            images = list(
                pool.map(
                    _guarded_image, indices, [config] * len(indices), [pipeline] * len(indices),
                    [attacks] * len(indices), [False] * len(indices),
                )
            )
    else:
        images = []
        with Progress(
            TextColumn("[bold blue]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            TimeElapsedColumn(),
            console=run_logger.console,
            disable=not verbose,
        ) as progress:
            task = progress.add_task("Optimizing", total=len(indices))
            for index in indices:
                images.append(_guarded_image(index, config, pipeline, attacks, verbose))
                progress.advance(task)

    failures = 0
    for image in images:
        if image.ok:
            if verbose:
                run_logger.log_image_complete(image.index, image.clean_bit_accuracy, image.iterations)
        else:
            failures += 1
            if verbose:
                run_logger.log_image_failure(image.index, image.error or "unknown error")
    if failures >= FAILURE_LIMIT * len(images):
        raise ExperimentAbortedError(f"{failures} of {len(images)} images failed")

    report = summarize(config, attacks, images, time.perf_counter() - started)
    if verbose:
        for item in report.attacks:
            run_logger.log_attack_result(item.name, item.mean_bit_accuracy, item.tpr)
    return report


def run_ablation(
    config: ExperimentConfig,
    modes: Iterable[AblationMode] = tuple(AblationMode),
    verbose: bool = False,
) -> dict[str, RobustnessReport]:
    """One run per watermark mode, sharing the calibrated pipeline."""
    pipeline = build_pipeline(config)
    return {
        AblationMode(mode).value: run_experiment(with_mode(config, mode), pipeline, verbose)
        for mode in modes
    }


def run_td_sweep(
    config: ExperimentConfig,
    detail_steps: Sequence[int] = (51, 151, 251, 351),
    verbose: bool = False,
) -> dict[int, RobustnessReport]:
    """One run per detail-injection timestep, sharing the calibrated pipeline."""
    pipeline = build_pipeline(config)
    return {
        int(t_d): run_experiment(with_detail_step(config, t_d), pipeline, verbose)
        for t_d in detail_steps
    }


@dataclass(frozen=True)
class GuidanceDiagnostic:
    """Mean guidance magnitude per timestep, averaged over trajectories."""
    timesteps: list[int]
    magnitudes: list[float]
    early_mean: float
    late_mean: float


def profile_guidance(config: ExperimentConfig, trajectories: int = 20, fraction: float = 0.4) -> GuidanceDiagnostic:
    """Averages |s (eps_c - eps_u)| per step over conditional trajectories.

    early_mean and late_mean cover the first and last `fraction` of the steps.
    """
    schedule, prior, sampler = build_components(config)
    if not sampler.conditional:
        raise ConfigError("guidance profiling needs a conditional sampler")
    rng = np.random.default_rng(derive_seed(config.seed, "guidance"))
    totals = np.zeros(sampler.steps)
    for _ in range(trajectories):
        _, trajectory = sample(rng.standard_normal(prior.shape), sampler, prior, schedule, record=True)
        totals += [value for _, value in guidance_profile(trajectory, sampler.guidance_scale)]
    magnitudes = totals / max(trajectories, 1)
    span = max(1, int(round(fraction * sampler.steps)))
    return GuidanceDiagnostic(
        timesteps=list(sampler.timesteps),
        magnitudes=[float(m) for m in magnitudes],
        early_mean=float(np.mean(magnitudes[:span])),
        late_mean=float(np.mean(magnitudes[-span:])),
    )
