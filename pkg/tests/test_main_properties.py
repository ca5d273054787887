"""End-to-end tests for the command-line entry point."""

import json
import tempfile
from io import StringIO
from pathlib import Path

import pandas as pd
import pytest
import yaml
from rich.console import Console

from latentmark import cli, main as entry, run_logger
from latentmark.main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from latentmark.report import read_manifest
from latentmark.storage import file_digest, read_bundle, read_grid
from tests.helpers import tiny_config_dict


@pytest.fixture(autouse=True)
def captured(monkeypatch):
    buffer = StringIO()
    quiet = Console(file=buffer, force_terminal=True, width=120)
    for module in (cli, entry, run_logger):
        monkeypatch.setattr(module, "console", quiet)
    return buffer


def write_config(root: Path, **changes) -> Path:
    data = tiny_config_dict(root / "run")
    data.update(changes)
    path = root / "run.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_usage_exit_codes():
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["evaluate", "--format", "xml"]) == EXIT_USAGE


def test_init_config(captured):
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "desk.yaml"
        assert main(["init-config", str(path)]) == EXIT_OK
        assert "grid:" in path.read_text()

        path.write_text("seed: 1\n")
        assert main(["init-config", str(path)]) == EXIT_FAILURE
        assert path.read_text() == "seed: 1\n"
        assert "already exists" in captured.getvalue()

        assert main(["init-config", str(path), "--force"]) == EXIT_OK
        assert "grid:" in path.read_text()


def test_config_problems_fail_cleanly(captured):
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        assert main(["evaluate", "--config", str(root / "missing.yaml")]) == EXIT_FAILURE

        bad_step = tiny_config_dict(root / "run")
        bad_step["sampler"]["detail_step"] = 40
        (root / "bad.yaml").write_text(yaml.safe_dump(bad_step))
        assert main(["evaluate", "--config", str(root / "bad.yaml")]) == EXIT_FAILURE
        assert "ConfigError" in captured.getvalue()

        assert main(["evaluate", "--config", str(write_config(root)), "--images", "0"]) == EXIT_FAILURE
        assert "ReportError" in captured.getvalue()


def test_evaluate_writes_reports_artifacts_and_manifest(captured):
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        config = write_config(root)
        assert main(["evaluate", "--config", str(config), "--seed", "5"]) == EXIT_OK
        run = root / "run"

        frame = pd.read_csv(run / "report.csv")
        assert frame["attack"].tolist() == ["none", "hflip", "rotate(angle=40)", "regenerate(strength=41)"]
        assert frame["images"].tolist() == [2, 2, 2, 2]
        assert frame["bit_accuracy"].between(0.0, 1.0).all()

        document = json.loads((run / "report.json").read_text())
        assert [image["index"] for image in document["images"]] == [0, 1]
        assert document["threshold"] == 5

        for name in ("extractor.npz", "carriers.npz", "watermarks/image_001.npz", "history/image_000.csv"):
            assert (run / name).exists(), name
        latent, metadata = read_grid(run / "latents" / "image_000.npy")
        assert latent.shape == (1, 4, 4)
        assert len(metadata["message"]) == 4

        manifest = read_manifest(run / "manifest.json")
        assert manifest.seed == 5
        assert manifest.image_seeds["0"]["latent"] > 0
        entry_csv = manifest.artifacts["report.csv"]
        assert entry_csv["sha256"] == file_digest(Path(entry_csv["path"]))
        assert "Average over attacks" in captured.getvalue()

        assert main(["decode", str(run / "latents" / "image_000.npy"), "--config", str(config)]) == EXIT_OK
        assert "Bit accuracy" in captured.getvalue()

        assert main(
            ["attack", str(run / "latents" / "image_000.npy"), "--kind", "rotate", "--param", "angle=90",
             "--config", str(config)]
        ) == EXIT_OK
        attacked, attacked_meta = read_grid(run / "attacked" / "image_000_rotate.npy")
        assert attacked.shape == (1, 4, 4)
        assert attacked_meta["attack"] == "rotate(angle=90)"


def test_evaluate_is_reproducible():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        config = write_config(root)
        first, second = root / "first", root / "second"
        assert main(["evaluate", "--config", str(config), "--out", str(first), "--format", "csv"]) == EXIT_OK
        assert main(["evaluate", "--config", str(config), "--out", str(second), "--format", "csv"]) == EXIT_OK
        assert (first / "report.csv").read_text() == (second / "report.csv").read_text()
        assert not (first / "report.json").exists()


def test_generate_calibrate_and_embed():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        config = write_config(root)
        run = root / "run"

        assert main(["generate", "--config", str(config), "--count", "3"]) == EXIT_OK
        samples, metadata = read_bundle(run / "generated.npz")
        assert sorted(samples) == ["sample_000", "sample_001", "sample_002"]
        assert metadata["kind"] == "samples"

        assert main(["calibrate", "--config", str(config)]) == EXIT_OK
        assert (run / "carriers.npz").exists()

        assert main(["embed", "--config", str(config), "--image", "1", "--iterations", "2"]) == EXIT_OK
        history = pd.read_csv(run / "history" / "image_001.csv")
        assert len(history) == 2
        assert (run / "watermarks" / "image_001.npz").exists()


def test_gradcheck_and_guidance_commands(captured):
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp))
        assert main(["gradcheck", "--config", str(config), "--coordinates", "8"]) == EXIT_OK
        assert "PASS" in captured.getvalue()
        assert main(["profile-guidance", "--config", str(config), "--trajectories", "3"]) == EXIT_OK
        assert "early mean" in captured.getvalue()


@pytest.mark.slow
def test_ablation_and_td_sweep_write_one_report_per_run():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        config = write_config(root)
        assert main(["evaluate", "--config", str(config), "--ablation"]) == EXIT_OK
        for mode in ("dual", "structure_only", "detail_only"):
            assert (root / "run" / mode / "report.csv").exists()

        assert main(["evaluate", "--config", str(config), "--td-sweep", "41", "61"]) == EXIT_OK
        assert (root / "run" / "td_41" / "report.json").exists()
        assert (root / "run" / "td_61" / "report.csv").exists()
