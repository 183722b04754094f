"""Parameter checkpoints: a versioned JSON map of named float64 tensors.

Layout:
    {
      "format": "bevcontrast-checkpoint",
      "version": 1,
      "tensors": {"lidar.w1": {"shape": [3, 32], "data": [...]}, ...}
    }

Values are written with Python float repr, which round-trips IEEE
doubles exactly, so saving and loading is bit-preserving.
"""
from __future__ import annotations

import json
import os
from typing import Mapping

import numpy as np

from ..errors import CheckpointError

FORMAT_NAME = "bevcontrast-checkpoint"
FORMAT_VERSION = 1


def save_tensors(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tensors": {
            name: {
                "shape": list(np.asarray(arr).shape),
                "data": [float(x) for x in np.asarray(arr, dtype=np.float64).ravel()],
            }
            for name, arr in tensors.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_tensors(path: str) -> dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a {FORMAT_NAME} file")
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {payload.get('version')!r}"
        )
    tensors = {}
    for name, spec in payload["tensors"].items():
        arr = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        tensors[name] = arr
    return tensors


def save_bundles(path: str, bundles: Mapping[str, Mapping[str, np.ndarray]]) -> None:
    """Save several named parameter groups as 'group.tensor' entries."""
    flat = {}
    for group, tensors in bundles.items():
        for name, arr in tensors.items():
            flat[f"{group}.{name}"] = arr
    save_tensors(path, flat)


def load_bundles(path: str) -> dict[str, dict[str, np.ndarray]]:
    flat = load_tensors(path)
    bundles: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in flat.items():
        group, _, name = key.partition(".")
        if not name:
            raise CheckpointError(f"{path}: malformed tensor name {key!r}")
        bundles.setdefault(group, {})[name] = arr
    return bundles
