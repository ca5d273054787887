"""Report, history, artifact and manifest writers."""

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from . import __version__, run_logger
from .errors import ReportError
from .experiment import AttackSummary, ImageResult, Pipeline, RobustnessReport
from .optimizer import HistoryRow
from .storage import file_digest, save_carriers, save_extractor, save_watermarks, write_grid

REPORT_COLUMNS = ["attack", "category", "bit_accuracy", "tpr", "threshold", "images"]
HISTORY_COLUMNS = ["iteration", "msg", "init", "low", "high", "total", "bit_accuracy"]


def report_frame(report: RobustnessReport) -> pd.DataFrame:
    """One row per attack, the clean row included; no timing columns."""
    rows = [
        {
            "attack": item.name,
            "category": item.category,
            "bit_accuracy": item.mean_bit_accuracy,
            "tpr": item.tpr,
            "threshold": item.threshold,
            "images": item.images,
        }
        for item in report.attacks
    ]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def report_to_dict(report: RobustnessReport) -> dict[str, Any]:
    return {
        "bits": report.bits,
        "fpr": report.fpr,
        "threshold": report.threshold,
        "mode": report.mode,
        "detail_step": report.detail_step,
        "config_digest": report.config_digest,
        "wall_time": report.wall_time,
        "attacks": [asdict(item) for item in report.attacks],
        "category_means": report.category_means(),
        "average_over_attacks": report.average_over_attacks(),
        "images": [image.to_dict() for image in report.images],
    }


def report_from_dict(data: dict[str, Any]) -> RobustnessReport:
    """Inverse of report_to_dict (derived aggregates are recomputed, not read).

    Raises:
        ReportError: If a required key is missing
    """
    try:
        return RobustnessReport(
            bits=int(data["bits"]),
            fpr=float(data["fpr"]),
            threshold=int(data["threshold"]),
            mode=data["mode"],
            detail_step=int(data["detail_step"]),
            attacks=[AttackSummary(**item) for item in data["attacks"]],
            images=[ImageResult.from_dict(item) for item in data["images"]],
            config_digest=data["config_digest"],
            wall_time=float(data.get("wall_time", 0.0)),
        )
    except (KeyError, TypeError) as e:
        raise ReportError(f"malformed report document: {e}") from e


def read_report_json(path: Path) -> RobustnessReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def write_history_csv(history: Sequence[HistoryRow], path: Path) -> Path:
    """Per-iteration loss breakdown and bit accuracy for one image."""
    frame = pd.DataFrame([row.as_dict() for row in history], columns=HISTORY_COLUMNS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def _plot_attacks(report: RobustnessReport, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(report.attacks)), 4))
    names = [item.name for item in report.attacks]
    ax.bar(range(len(names)), [item.mean_bit_accuracy for item in report.attacks], color="steelblue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.axhline(0.5, color="grey", linestyle="--", linewidth=0.8)
    ax.set_ylabel("mean bit accuracy")
    ax.set_title(f"Robustness ({report.mode}, t_d={report.detail_step})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _plot_history(report: RobustnessReport, path: Path) -> Path | None:
    histories = [image.history for image in report.images if image.history]
    if not histories:
        return None
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for history in histories:
        ax.plot([row.iteration for row in history], [row.total for row in history], alpha=0.4, linewidth=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_title("Optimization history")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(
    report: RobustnessReport,
    output_dir: Path,
    formats: Sequence[str] = ("csv", "json"),
    plot: bool = False,
) -> list[Path]:
    """Writes the report in the requested formats, plus per-image histories and plots.

    Returns:
        list[Path]: Every file written

    Raises:
        ReportError: If a format is unknown
        OSError: If the directory cannot be written
    """
    unknown = set(formats) - {"csv", "json"}
    if unknown:
        raise ReportError(f"unknown report format(s): {sorted(unknown)}")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if "csv" in formats:
        path = output_dir / "report.csv"
        report_frame(report).to_csv(path, index=False)
        written.append(path)
    if "json" in formats:
        path = output_dir / "report.json"
        path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True))
        written.append(path)

    for image in report.images:
        if image.history:
            written.append(write_history_csv(image.history, output_dir / "history" / f"image_{image.index:03d}.csv"))

    if plot:
        plots = output_dir / "plots"
        plots.mkdir(exist_ok=True)
        written.append(_plot_attacks(report, plots / "attack_accuracy.png"))
        history_plot = _plot_history(report, plots / "loss_history.png")
        if history_plot is not None:
            written.append(history_plot)

    for path in written:
        run_logger.log_artifact_written(path.suffix.lstrip(".") or "file", path)
    return written


def write_run_artifacts(report: RobustnessReport, pipeline: Pipeline, output_dir: Path) -> dict[str, Path]:
    """Persists the extractor, carriers and every image's watermarks and latent."""
    output_dir = Path(output_dir)
    artifacts = {
        "extractor": save_extractor(output_dir / "extractor.npz", pipeline.extractor),
        "carriers": save_carriers(output_dir / "carriers.npz", pipeline.carriers),
    }
    for image in report.images:
        if image.watermarks is not None:
            artifacts[f"watermarks_{image.index:03d}"] = save_watermarks(
                output_dir / "watermarks" / f"image_{image.index:03d}.npz", image.watermarks
            )
        if image.latent is not None:
            artifacts[f"latent_{image.index:03d}"] = write_grid(
                output_dir / "latents" / f"image_{image.index:03d}.npy",
                image.latent,
                {"image": image.index, "message": image.message},
            )
    return artifacts


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Index of one run: configuration, seeds and artifact digests."""
    config: dict[str, Any]
    config_digest: str
    seed: int
    image_seeds: dict[str, dict[str, int]] = field(default_factory=dict)
    artifacts: dict[str, dict[str, str]] = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    finished: str = ""
    wall_time: float = 0.0

    def add_artifact(self, name: str, path: Path) -> None:
        self.artifacts[name] = {"path": str(path), "sha256": file_digest(Path(path), "sha256")}


def write_manifest(manifest: RunManifest, path: Path) -> Path:
    """Writes manifest.json after checking that every listed artifact exists.

    Raises:
        ReportError: If an artifact path is missing on disk
    """
    missing = [entry["path"] for entry in manifest.artifacts.values() if not Path(entry["path"]).exists()]
    if missing:
        raise ReportError(f"manifest lists missing artifact(s): {missing}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True))
    return path


def read_manifest(path: Path) -> RunManifest:
    return RunManifest(**json.loads(Path(path).read_text()))


def category_table_rows(report: RobustnessReport) -> list[tuple[str, float]]:
    """(category, mean accuracy) rows followed by the overall average."""
    rows = sorted(report.category_means().items())
    average = report.average_over_attacks()
    if not np.isnan(average):
        rows.append(("average", average))
    return rows
