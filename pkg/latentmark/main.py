"""Main entry point for the LatentMark command line."""

import argparse
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from rich.console import Console

from .attacks import AttackSpec, RegenerationContext, apply_attack, is_applicable
from .carriers import Message, decode, embed_image, random_message
from .cli import (
    COMMANDS,
    build_parser,
    display_comparison,
    display_decode,
    display_error,
    display_gradcheck,
    display_guidance,
    display_report,
    parse_params,
)
from .config import (
    ExperimentConfig,
    config_to_dict,
    create_template_config,
    load_config,
    merge_with_cli_args,
    validate_config,
)
from .detection import bit_accuracy
from .errors import ConfigError, LatentMarkError
from .experiment import (
    Pipeline,
    build_components,
    build_pipeline,
    derive_seed,
    make_objective,
    profile_guidance,
    run_ablation,
    run_experiment,
    run_td_sweep,
)
from .extractor import build_extractor
from .optimizer import optimize_watermark, run_gradcheck
from .report import RunManifest, utc_timestamp, write_history_csv, write_manifest, write_report, write_run_artifacts
from .run_logger import log_artifact_written, log_image_complete
from .sampler import sample
from .storage import (
    config_digest,
    load_carriers,
    load_extractor,
    read_grid,
    save_carriers,
    save_extractor,
    save_watermarks,
    write_bundle,
    write_grid,
)

console = Console()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _load(args: argparse.Namespace) -> ExperimentConfig:
    config = merge_with_cli_args(load_config(args.config), vars(args))
    problems = validate_config(config)
    if problems:
        raise ConfigError("; ".join(problems))
    return config


def _pipeline(config: ExperimentConfig, args: argparse.Namespace) -> Pipeline:
    """Reuses calibrated extractor/carriers when given or present in the output directory."""
    extractor_path = getattr(args, "extractor", None) or config.output_dir / "extractor.npz"
    carriers_path = getattr(args, "carriers", None) or config.output_dir / "carriers.npz"
    extractor = load_extractor(extractor_path) if Path(extractor_path).exists() else None
    carriers = load_carriers(carriers_path) if Path(carriers_path).exists() else None
    if carriers is not None and extractor is None:
        extractor = build_extractor(
            config.grid.shape, config.codec.hidden_dim, config.codec.feature_dim, config.codec.extractor_seed
        )
    return build_pipeline(config, extractor, carriers)


def cmd_generate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    schedule, prior, sampler = build_components(config)
    if args.unconditional:
        sampler = sampler.unconditional()
    rng = np.random.default_rng(derive_seed(config.seed, "generate"))
    samples = {}
    for i in range(args.count):
        samples[f"sample_{i:03d}"], _ = sample(rng.standard_normal(prior.shape), sampler, prior, schedule)
    path = write_bundle(
        config.output_dir / "generated.npz", samples, {"kind": "samples", "condition": sampler.condition}
    )
    log_artifact_written("samples", path)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    console.print(f"[cyan]Calibrating carriers on {config.codec.corpus_size} unwatermarked samples...[/cyan]")
    pipeline = build_pipeline(config)
    log_artifact_written("extractor", save_extractor(config.output_dir / "extractor.npz", pipeline.extractor))
    log_artifact_written("carriers", save_carriers(config.output_dir / "carriers.npz", pipeline.carriers))
    return EXIT_OK


def cmd_embed(args: argparse.Namespace, config: ExperimentConfig) -> int:
    pipeline = _pipeline(config, args)
    objective, _ = make_objective(config, pipeline, args.image)
    result = optimize_watermark(objective, config.optimizer, image=args.image, verbose=True)
    log_image_complete(args.image, result.bit_accuracy, result.iterations)

    stem = f"image_{args.image:03d}"
    written = {
        "watermarks": save_watermarks(config.output_dir / "watermarks" / f"{stem}.npz", result.pair),
        "latent": write_grid(
            config.output_dir / "latents" / f"{stem}.npy",
            result.x_0,
            {"image": args.image, "message": objective.message.to_string()},
        ),
        "history": write_history_csv(result.history, config.output_dir / "history" / f"{stem}.csv"),
    }
    for kind, path in written.items():
        log_artifact_written(kind, path)
    console.print(f"[bold cyan]Message:[/bold cyan] {objective.message.to_string()}")
    return EXIT_OK


def cmd_decode(args: argparse.Namespace, config: ExperimentConfig) -> int:
    latent, metadata = read_grid(args.latent)
    pipeline = _pipeline(config, args)
    decoded = decode(embed_image(latent, pipeline.extractor, pipeline.carriers), pipeline.carriers)

    expected: Message | None = None
    if args.message is not None:
        expected = Message.from_string(args.message)
    elif args.message_seed is not None:
        expected = random_message(pipeline.carriers.k, args.message_seed)
    elif metadata.get("message"):
        expected = Message.from_string(metadata["message"])

    accuracy = bit_accuracy(expected, decoded) if expected is not None else None
    display_decode(decoded.to_string(), expected.to_string() if expected else None, accuracy)
    return EXIT_OK


def cmd_attack(args: argparse.Namespace, config: ExperimentConfig) -> int:
    latent, metadata = read_grid(args.latent)
    spec = AttackSpec.from_dict({"kind": args.kind, "params": parse_params(args.param), "seed": args.attack_seed})
    if not is_applicable(spec, latent.shape):
        raise ConfigError(f"{spec.name} does not apply to a grid of shape {latent.shape}")
    schedule, prior, sampler = build_components(config)
    attacked = apply_attack(latent, spec, RegenerationContext(prior, schedule, sampler))
    path = write_grid(
        config.output_dir / "attacked" / f"{Path(args.latent).stem}_{spec.kind.value}.npy",
        attacked,
        {**metadata, "attack": spec.name},
    )
    log_artifact_written("attacked latent", path)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    started = utc_timestamp()
    if args.ablation:
        reports = run_ablation(config, verbose=True)
        display_comparison(reports, "mode")
        for mode, report in reports.items():
            write_report(report, config.output_dir / mode, config.report_formats, config.plots)
        return EXIT_OK
    if args.td_sweep:
        reports = run_td_sweep(config, args.td_sweep, verbose=True)
        display_comparison(reports, "t_d")
        for t_d, report in reports.items():
            write_report(report, config.output_dir / f"td_{t_d}", config.report_formats, config.plots)
        return EXIT_OK

    pipeline = _pipeline(config, args)
    report = run_experiment(config, pipeline, verbose=True)
    display_report(report)

    written = write_report(report, config.output_dir, config.report_formats, config.plots)
    artifacts = write_run_artifacts(report, pipeline, config.output_dir)
    manifest = RunManifest(
        config=config_to_dict(config),
        config_digest=config_digest(config_to_dict(config)),
        seed=config.seed,
        image_seeds={str(image.index): image.seeds for image in report.images},
        started=started,
        finished=utc_timestamp(),
        wall_time=report.wall_time,
    )
    for path in written:
        manifest.add_artifact(str(path.relative_to(config.output_dir)), path)
    for name, path in artifacts.items():
        manifest.add_artifact(name, path)
    log_artifact_written("manifest", write_manifest(manifest, config.output_dir / "manifest.json"))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: ExperimentConfig) -> int:
    if args.steps is not None:
        config.sampler.inference_steps = args.steps
        problems = validate_config(config)
        if problems:
            raise ConfigError("; ".join(problems))
    pipeline = _pipeline(config, args)
    objective, _ = make_objective(config, pipeline, 0)
    report = run_gradcheck(objective, h=args.h, coordinates=args.coordinates, seed=config.seed)
    display_gradcheck(report)
    return EXIT_OK if report.passed() else EXIT_FAILURE


def cmd_profile_guidance(args: argparse.Namespace, config: ExperimentConfig) -> int:
    display_guidance(profile_guidance(config, args.trajectories))
    return EXIT_OK


def cmd_init_config(args: argparse.Namespace) -> int:
    if args.path.exists() and not args.force:
        display_error(f"{args.path} already exists (use --force to overwrite)")
        return EXIT_FAILURE
    create_template_config(args.path)
    log_artifact_written("config", args.path)
    return EXIT_OK


HANDLERS = {
    "generate": cmd_generate,
    "calibrate": cmd_calibrate,
    "embed": cmd_embed,
    "decode": cmd_decode,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "profile-guidance": cmd_profile_guidance,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Main application flow; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    if args.command not in COMMANDS:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "init-config":
            return cmd_init_config(args)
        config = _load(args)
        return HANDLERS[args.command](args, config)
    except KeyboardInterrupt:
        console.print()
        console.print("[yellow]Operation cancelled by user.[/yellow]")
        return 130
    except FileNotFoundError as e:
        display_error(str(e))
        return EXIT_FAILURE
    except (LatentMarkError, ValueError) as e:
        display_error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
