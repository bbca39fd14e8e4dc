"""Small helpers shared across modules: seeding, fingerprints, JSON output."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np


def derive_seed(master: int, *labels: object) -> int:
    """Stable 63-bit sub-seed for ``labels`` under ``master``.

    The rule is ``sha256("<master>/<label1>/<label2>...")``, first 8 bytes,
    big-endian, top bit cleared.  It does not depend on call order, so adding
    a new consumer never shifts the streams of existing ones.
    """
    key = "/".join([str(int(master))] + [str(x) for x in labels])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def rng_for(master: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _default(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(obj: Any) -> str:
    """Canonical JSON text: sorted keys, fixed indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, default=_default, allow_nan=False) + "\n"


def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))


def read_json(path: str | Path) -> Any:
    with open(path) as f:
        return json.load(f)
