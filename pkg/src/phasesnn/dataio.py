"""Tensor-batch and label files shared by the CLI and the export tooling.

A batch is `<name>.bin` (little-endian float32, row-major) described by a
JSON sidecar `<name>.json` holding {"count": N, "shape": [...]}. Labels are
a JSON file {"labels": [...]}.
"""

import json
import os

import numpy as np

from .errors import ManifestError


def sidecar_path(bin_path) -> str:
    return os.path.splitext(str(bin_path))[0] + ".json"


def save_batch(bin_path, batch: np.ndarray) -> None:
    batch = np.ascontiguousarray(batch, dtype=np.float64).astype("<f4")
    with open(bin_path, "wb") as fh:
        fh.write(batch.tobytes())
    with open(sidecar_path(bin_path), "w", encoding="utf-8") as fh:
        json.dump({"count": int(batch.shape[0]),
                   "shape": list(batch.shape[1:])}, fh)


def load_batch(bin_path) -> np.ndarray:
    try:
        with open(sidecar_path(bin_path), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        with open(bin_path, "rb") as fh:
            raw = fh.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read batch {bin_path}: {exc}") from None
    count, shape = int(meta["count"]), tuple(meta["shape"])
    expected = count * int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ManifestError(
            f"batch blob {bin_path} holds {len(raw)} bytes, sidecar implies "
            f"{expected}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return arr.reshape((count,) + shape)


def save_labels(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"labels": [int(v) for v in labels]}, fh)


def load_labels(path) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read labels {path}: {exc}") from None
    return np.asarray(doc["labels"], dtype=np.int64)
