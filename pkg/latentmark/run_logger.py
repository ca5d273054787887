"""Run logger module for real-time console logging during optimization and evaluation."""

from pathlib import Path

from rich.console import Console

from .losses import LossBreakdown

# Create a global console instance for logging
console = Console()


def log_iteration(image: int, iteration: int, breakdown: LossBreakdown, bit_acc: float) -> None:
    """Logs one optimization iteration's loss breakdown.

    Args:
        image: Image index
        iteration: Iteration number
        breakdown: Loss components and total
        bit_acc: Clean bit accuracy at this iteration
    """
    console.print(
        f"[cyan][IMG {image}][/cyan] iter {iteration:>5}  "
        f"total={breakdown.total:.4e}  msg={breakdown.msg:.4f}  init={breakdown.init:.2e}  "
        f"low={breakdown.low:.2e}  high={breakdown.high:.2e}  bits={bit_acc:.3f}",
        highlight=False,
    )


def log_early_stop(image: int, iteration: int) -> None:
    """Logs that the message loss stayed at zero long enough to stop."""
    console.print(
        f"[bold blue][EARLY STOP][/bold blue] image {image} converged at iteration {iteration}",
        highlight=False,
    )


def log_image_complete(image: int, clean_acc: float, iterations: int) -> None:
    """Logs completion of one image's watermark optimization.

    Args:
        image: Image index
        clean_acc: Bit accuracy on the unattacked output
        iterations: Number of iterations actually run
    """
    color = "green" if clean_acc == 1.0 else "yellow"
    console.print(
        f"[bold {color}][DONE][/bold {color}] image {image}: clean bit accuracy "
        f"{clean_acc:.3f} after {iterations} iteration(s)",
        highlight=False,
    )


def log_image_failure(image: int, message: str) -> None:
    """Logs a failed image with red/bold styling."""
    console.print(f"[bold red][ERROR][/bold red] image {image}: {message}", highlight=False)


def log_attack_result(name: str, mean_acc: float, tpr: float) -> None:
    """Logs the aggregate result of one attack."""
    console.print(
        f"[magenta][ATTACK][/magenta] {name:<28} bit acc {mean_acc:.3f}  TPR {tpr:.3f}",
        highlight=False,
    )


def log_artifact_written(kind: str, path: Path | str) -> None:
    """Logs an artifact file written to disk."""
    console.print(f"[dim][WRITE][/dim] {kind} → {path}", highlight=False)


def log_warning(message: str) -> None:
    """Logs a warning with yellow styling."""
    console.print(f"[bold yellow][WARNING][/bold yellow] {message}", highlight=False)
