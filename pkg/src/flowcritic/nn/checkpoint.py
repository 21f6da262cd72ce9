"""Versioned checkpoint blobs for named parameter arrays.

The on-disk format is a single JSON document: a format tag, an integer
version, optional metadata, and a mapping from tensor name to shape plus
row-major float64 values. Python's repr-based float serialization makes the
round trip bit-exact for finite values.
"""

from __future__ import annotations

import json
import os

import numpy as np

FORMAT_TAG = "flowcritic.checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_entry(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    doc = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "metadata": metadata or {},
        "tensors": {name: _tensor_entry(arr) for name, arr in tensors.items()},
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if doc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    tensors = {}
    for name, entry in doc["tensors"].items():
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        tensors[name] = arr
    return tensors, doc.get("metadata", {})
