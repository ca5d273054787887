"""CLI module: argument parsing and Rich display helpers."""

import argparse
from pathlib import Path
from typing import Sequence

from rich.console import Console
from rich.table import Table

from .attacks import AttackKind
from .config import AblationMode
from .report import category_table_rows

console = Console()

COMMANDS = (
    "generate",
    "calibrate",
    "embed",
    "decode",
    "attack",
    "evaluate",
    "gradcheck",
    "profile-guidance",
    "init-config",
)


def _global_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="YAML or JSON configuration file")
    parent.add_argument("--seed", type=int, help="Master seed (overrides the configuration)")
    parent.add_argument("--out", type=Path, help="Output directory (overrides the configuration)")
    parent.add_argument("--format", choices=["csv", "json"], help="Report format (overrides the configuration)")
    return parent


def build_parser() -> argparse.ArgumentParser:
    """Builds the argument parser with one subparser per command."""
    parser = argparse.ArgumentParser(
        prog="latentmark",
        description="LatentMark - optimize and evaluate diffusion-latent watermarks",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    flags = _global_flags()

    generate = sub.add_parser("generate", parents=[flags], help="Sample unwatermarked latents")
    generate.add_argument("--count", type=int, default=1, help="Number of samples")
    generate.add_argument("--unconditional", action="store_true", help="Ignore the configured condition")

    sub.add_parser("calibrate", parents=[flags], help="Build the extractor and whitened carriers")

    embed = sub.add_parser("embed", parents=[flags], help="Optimize watermarks for one image")
    embed.add_argument("--image", type=int, default=0, help="Image index (selects the derived seeds)")
    embed.add_argument("--iterations", type=int, help="Iteration budget (overrides the configuration)")
    embed.add_argument("--mode", choices=[m.value for m in AblationMode], help="Watermark mode")
    embed.add_argument("--extractor", type=Path, help="Extractor file from `calibrate`")
    embed.add_argument("--carriers", type=Path, help="Carrier file from `calibrate`")

    decode = sub.add_parser("decode", parents=[flags], help="Decode bits from a stored latent")
    decode.add_argument("latent", type=Path, help="Latent grid file")
    decode.add_argument("--extractor", type=Path, help="Extractor file from `calibrate`")
    decode.add_argument("--carriers", type=Path, help="Carrier file from `calibrate`")
    group = decode.add_mutually_exclusive_group()
    group.add_argument("--message", help="Expected message as a 0/1 string")
    group.add_argument("--message-seed", type=int, help="Compare against a random message with this seed")

    attack = sub.add_parser("attack", parents=[flags], help="Apply one attack to a stored latent")
    attack.add_argument("latent", type=Path, help="Latent grid file")
    attack.add_argument("--kind", required=True, choices=[k.value for k in AttackKind], help="Attack kind")
    attack.add_argument(
        "--param", action="append", default=[], metavar="KEY=VALUE", help="Attack parameter (repeatable)"
    )
    attack.add_argument("--attack-seed", type=int, default=0, help="Seed for stochastic attacks")

    evaluate = sub.add_parser("evaluate", parents=[flags], help="Run the full robustness experiment")
    evaluate.add_argument("--images", type=int, help="Number of images (overrides the configuration)")
    evaluate.add_argument("--iterations", type=int, help="Iteration budget (overrides the configuration)")
    evaluate.add_argument("--workers", type=int, help="Worker processes (overrides the configuration)")
    evaluate.add_argument("--mode", choices=[m.value for m in AblationMode], help="Watermark mode")
    evaluate.add_argument("--plots", action="store_true", help="Also write plot images")
    sweep = evaluate.add_mutually_exclusive_group()
    sweep.add_argument("--ablation", action="store_true", help="Run every watermark mode")
    sweep.add_argument("--td-sweep", type=int, nargs="+", metavar="T_D", help="Run one experiment per detail step")

    gradcheck = sub.add_parser("gradcheck", parents=[flags], help="Compare adjoint, reference and FD gradients")
    gradcheck.add_argument("--steps", type=int, help="Inference steps (overrides the configuration)")
    gradcheck.add_argument("--coordinates", type=int, default=64, help="Coordinates sampled per watermark")
    gradcheck.add_argument("--h", type=float, default=1e-5, help="Finite-difference step")

    profile = sub.add_parser("profile-guidance", parents=[flags], help="Guidance magnitude per timestep")
    profile.add_argument("--trajectories", type=int, default=20, help="Number of trajectories to average")

    init = sub.add_parser("init-config", parents=[flags], help="Write the template configuration")
    init.add_argument("path", type=Path, help="Where to write the template")
    init.add_argument("--force", action="store_true", help="Overwrite an existing file")

    return parser


def parse_arguments(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse command-line arguments.

    Raises:
        SystemExit: On unknown commands or flags (argparse usage error)
    """
    return build_parser().parse_args(argv)


def parse_params(items: Sequence[str]) -> dict[str, float]:
    """Parses KEY=VALUE attack parameters into numbers.

    Raises:
        ValueError: If an item is not KEY=VALUE with a numeric value
    """
    params = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"attack parameter must look like KEY=VALUE, got '{item}'")
        number = float(value)
        params[key] = int(number) if number.is_integer() and "." not in value else number
    return params


def display_error(message: str) -> None:
    """Show formatted error messages.

    Args:
        message: Error message to display
    """
    console.print(f"[bold red]Error:[/bold red] {message}")


def display_report(report, title: str = "Robustness") -> None:
    """Show per-attack bit accuracy and TPR using a Rich table."""
    table = Table(title=f"{title} ({report.mode}, t_d={report.detail_step})", header_style="bold magenta")
    table.add_column("Attack", style="cyan")
    table.add_column("Category")
    table.add_column("Bit acc", justify="right", style="green")
    table.add_column(f"TPR@{report.fpr:g}", justify="right", style="green")
    table.add_column("Images", justify="right")
    for item in report.attacks:
        table.add_row(item.name, item.category, f"{item.mean_bit_accuracy:.3f}", f"{item.tpr:.3f}", str(item.images))
    for category, value in category_table_rows(report):
        if category == "average":
            table.add_row("[bold]Average over attacks[/bold]", "", f"[bold]{value:.3f}[/bold]", "", "")
        else:
            table.add_row(f"[dim]mean {category}[/dim]", category, f"{value:.3f}", "", "")
    console.print()
    console.print(table)
    console.print(f"threshold τ={report.threshold} of {report.bits} bits, {report.failures} failed image(s)")


def display_comparison(reports: dict, label: str) -> None:
    """Category means for several runs side by side (ablation or t_d sweep)."""
    categories = sorted({c for report in reports.values() for c in report.category_means()})
    table = Table(title=f"Comparison by {label}", header_style="bold magenta")
    table.add_column(label, style="cyan")
    for category in categories:
        table.add_column(category, justify="right")
    table.add_column("average", justify="right", style="bold")
    for key, report in reports.items():
        means = report.category_means()
        table.add_row(
            str(key),
            *[f"{means[c]:.3f}" if c in means else "-" for c in categories],
            f"{report.average_over_attacks():.3f}",
        )
    console.print()
    console.print(table)


def display_gradcheck(report) -> None:
    """Show gradient agreement metrics."""
    table = Table(title=f"Gradient check (N={report.steps})", header_style="bold magenta")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right", style="green")
    table.add_row("adjoint vs reference cosine", f"{report.adjoint_vs_reference_cosine:.6f}")
    table.add_row("adjoint vs reference rel. L2", f"{report.adjoint_vs_reference_rel_l2:.3e}")
    table.add_row("reference vs FD rel. error", f"{report.reference_vs_fd_rel_error:.3e}")
    table.add_row("FD coordinates", str(report.coordinates))
    table.add_row("adjoint retained buffers", str(report.adjoint_buffers))
    table.add_row("reference retained buffers", str(report.reference_buffers))
    console.print(table)
    status = "[bold green]PASS[/bold green]" if report.passed() else "[bold red]FAIL[/bold red]"
    console.print(f"Gradient check: {status}")


def display_decode(bits: str, expected: str | None, accuracy: float | None) -> None:
    console.print(f"[bold cyan]Decoded:[/bold cyan]  {bits}")
    if expected is not None:
        console.print(f"[bold cyan]Expected:[/bold cyan] {expected}")
        console.print(f"[bold cyan]Bit accuracy:[/bold cyan] {accuracy:.3f}")


def display_guidance(profile) -> None:
    """Show mean guidance magnitude per timestep."""
    table = Table(title="Guidance magnitude per timestep", header_style="bold magenta")
    table.add_column("t", justify="right", style="cyan")
    table.add_column("mean |s (eps_c - eps_u)|", justify="right", style="green")
    for t, value in zip(profile.timesteps, profile.magnitudes):
        table.add_row(str(t), f"{value:.4e}")
    console.print(table)
    console.print(f"early mean {profile.early_mean:.4e}, late mean {profile.late_mean:.4e}")
