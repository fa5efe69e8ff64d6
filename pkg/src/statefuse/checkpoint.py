"""Binary checkpoint container.

Layout::

    STATEFUSE-CHECKPOINT 1\\n
    <one-line JSON header>\\n
    <little-endian float64 arrays, concatenated in header order>

The header records the model kind, its config, a hash of that config, the
layer list and the name/shape of every array.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .core import DataError

MAGIC = b"STATEFUSE-CHECKPOINT 1\n"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save(path, kind: str, config: dict, arrays: dict, layers=None, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "layers": list(layers or []),
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not a statefuse checkpoint")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    offset = end + 1
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise DataError(f"{path}: truncated array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def read_header(path) -> dict:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise DataError(f"{path}: not a statefuse checkpoint")
        return json.loads(fh.readline())
