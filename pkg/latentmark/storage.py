"""Persistence for latent grids, watermarks, carriers and extractors.

Arrays go through numpy's own formats: a grid is one `.npy` file written by
np.save, a bundle of named arrays is one `.npz` archive written by np.savez.
Each array file has a JSON sidecar next to it (`<file>.json`) holding the
format version, the file's sha256 and the caller's metadata. Reads check the
digest before touching the array file.
"""

import hashlib
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np

from .carriers import CarrierSet
from .errors import StorageError
from .extractor import FeatureExtractor
from .watermark import WatermarkPair

FORMAT_VERSION = 1
_DTYPES = {4: np.float32, 8: np.float64}


def sidecar_path(path: Path) -> Path:
    """Where the JSON record for an array file lives."""
    path = Path(path)
    return path.with_name(path.name + ".json")


def _dtype(width: int) -> type:
    if width not in _DTYPES:
        raise StorageError(f"dtype width must be 4 or 8, got {width}")
    return _DTYPES[width]


def _write_sidecar(path: Path, layout: str, metadata: dict[str, Any] | None, **extra: Any) -> None:
    record = {
        "layout": layout,
        "version": FORMAT_VERSION,
        "sha256": file_digest(path, "sha256"),
        "metadata": metadata or {},
        **extra,
    }
    sidecar_path(path).write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")


def _read_sidecar(path: Path, layout: str) -> dict[str, Any]:
    """Loads and checks the sidecar of `path`.

    Raises:
        StorageError: If either file is missing, the record is corrupt, or the digest differs
    """
    path = Path(path)
    sidecar = sidecar_path(path)
    if not path.exists() or not sidecar.exists():
        raise StorageError(f"{path} needs both the array file and its sidecar {sidecar.name}")
    try:
        record = json.loads(sidecar.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StorageError(f"corrupt sidecar {sidecar}: {e}") from e
    if record.get("layout") != layout:
        raise StorageError(f"{path} holds a {record.get('layout')}, expected a {layout}")
    if record.get("version") != FORMAT_VERSION:
        raise StorageError(f"unsupported {layout} version {record.get('version')}")
    if record.get("sha256") != file_digest(path, "sha256"):
        raise StorageError(f"{path} does not match the digest in {sidecar.name}")
    return record


def write_grid(path: Path, array: np.ndarray, metadata: dict[str, Any] | None = None, width: int = 8) -> Path:
    """Saves one array with np.save plus its sidecar.

    Raises:
        StorageError: If width is not 4 or 8
    """
    dtype = _dtype(width)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.save(f, np.ascontiguousarray(array, dtype=dtype), allow_pickle=False)
    _write_sidecar(path, "grid", metadata)
    return path


def read_grid(path: Path) -> tuple[np.ndarray, dict[str, Any]]:
    """Loads a grid as float64 together with its metadata.

    Raises:
        StorageError: On a missing or mismatched sidecar, or an unreadable array file
    """
    record = _read_sidecar(path, "grid")
    try:
        array = np.load(path, allow_pickle=False)
    except (ValueError, OSError, EOFError) as e:
        raise StorageError(f"unreadable grid {path}: {e}") from e
    return np.asarray(array, dtype=np.float64), record["metadata"]


def write_bundle(
    path: Path,
    arrays: dict[str, np.ndarray],
    metadata: dict[str, Any] | None = None,
    width: int = 8,
) -> Path:
    """Writes several named arrays into one np.savez archive, in insertion order."""
    dtype = _dtype(width)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **{name: np.asarray(array, dtype=dtype) for name, array in arrays.items()})
    _write_sidecar(path, "bundle", metadata, names=list(arrays))
    return path


def read_bundle(path: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Reads a bundle written by write_bundle.

    Returns:
        tuple: (name -> float64 array, bundle metadata)

    Raises:
        StorageError: On a missing or mismatched sidecar, or an unreadable archive
    """
    record = _read_sidecar(path, "bundle")
    try:
        with np.load(path, allow_pickle=False) as archive:
            stored = {name: np.asarray(archive[name], dtype=np.float64) for name in archive.files}
    except (ValueError, OSError, EOFError, zipfile.BadZipFile) as e:
        raise StorageError(f"unreadable bundle {path}: {e}") from e
    if sorted(stored) != sorted(record["names"]):
        raise StorageError(f"{path} holds {sorted(stored)}, sidecar lists {record['names']}")
    return {name: stored[name] for name in record["names"]}, record["metadata"]


def save_watermarks(path: Path, pair: WatermarkPair) -> Path:
    metadata = {
        "kind": "watermarks",
        "shape": list(pair.shape),
        "init_variance": pair.init_variance,
        "sigma_td": pair.sigma_td,
        "seed": pair.seed,
    }
    return write_bundle(path, {"w_s": pair.w_s, "w_d": pair.w_d}, metadata)


def load_watermarks(path: Path) -> WatermarkPair:
    arrays, metadata = _read_kind(path, "watermarks")
    return WatermarkPair(
        w_s=arrays["w_s"],
        w_d=arrays["w_d"],
        init_variance=float(metadata["init_variance"]),
        sigma_td=float(metadata["sigma_td"]),
        seed=metadata.get("seed"),
    )


def save_carriers(path: Path, carriers: CarrierSet) -> Path:
    metadata = {"kind": "carriers", "k": carriers.k, "D": carriers.feature_dim, "seed": carriers.seed}
    arrays = {"mean": carriers.mean, "whitening": carriers.whitening, "carriers": carriers.carriers}
    return write_bundle(path, arrays, metadata)


def load_carriers(path: Path) -> CarrierSet:
    arrays, metadata = _read_kind(path, "carriers")
    carriers = CarrierSet(arrays["mean"], arrays["whitening"], arrays["carriers"], int(metadata["seed"]))
    if carriers.k != metadata["k"] or carriers.feature_dim != metadata["D"]:
        raise StorageError("carrier header does not match the stored arrays")
    return carriers


def save_extractor(path: Path, extractor: FeatureExtractor) -> Path:
    metadata = {"kind": "extractor", "input_shape": list(extractor.input_shape), "seed": extractor.seed}
    arrays = {"w1": extractor.w1, "b1": extractor.b1, "w2": extractor.w2, "b2": extractor.b2}
    return write_bundle(path, arrays, metadata)


def load_extractor(path: Path) -> FeatureExtractor:
    arrays, metadata = _read_kind(path, "extractor")
    return FeatureExtractor(
        input_shape=tuple(metadata["input_shape"]),
        w1=arrays["w1"],
        b1=arrays["b1"],
        w2=arrays["w2"],
        b2=arrays["b2"],
        seed=int(metadata["seed"]),
    )


def _read_kind(path: Path, kind: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    arrays, metadata = read_bundle(path)
    if metadata.get("kind") != kind:
        raise StorageError(f"{path} holds '{metadata.get('kind')}', expected '{kind}'")
    return arrays, metadata


def file_digest(path: Path, algorithm: str = "sha256") -> str:
    """Computes the hash of a file using streaming to handle large files.

    Raises:
        ValueError: If algorithm is not supported
    """
    if algorithm.lower() == "md5":
        hasher = hashlib.md5()
    elif algorithm.lower() == "sha256":
        hasher = hashlib.sha256()
    else:
        raise ValueError(f"Unsupported hash algorithm: {algorithm}")
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def config_digest(snapshot: dict[str, Any]) -> str:
    """sha256 of the canonical JSON form of a configuration snapshot."""
    canonical = json.dumps(snapshot, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
