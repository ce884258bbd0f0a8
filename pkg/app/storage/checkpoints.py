"""Versioned npz checkpoints: the field values plus a JSON metadata string."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from app.core.errors import CheckpointVersionError, StorageError

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, values: np.ndarray, meta: dict[str, Any]) -> Path:
    p = Path(path)
    payload = json.dumps({"version": CHECKPOINT_VERSION, **meta})
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        # a file handle keeps numpy from appending ".npz" to the name
        with open(p, "wb") as fh:
            np.savez(fh, X=values, meta=np.array(payload))
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {p}: {e}") from e
    return p


def load_checkpoint(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    p = Path(path)
    try:
        with np.load(p, allow_pickle=False) as data:
            values = data["X"]
            meta = json.loads(str(data["meta"]))
    except (OSError, KeyError, ValueError) as e:
        raise StorageError(f"cannot read checkpoint {p}: {e}") from e
    version = meta.pop("version", None)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
    return values, meta
