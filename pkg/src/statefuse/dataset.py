"""On-disk dataset layout.

::

    <root>/index.json                 dataset-level list of trials
    <root>/<trial_id>/manifest.json   user, sample rate, vocabulary, column names
    <root>/<trial_id>/kinematics.csv  frame + one column per kinematic feature
    <root>/<trial_id>/visfeat.csv     frame + one column per visual feature
    <root>/<trial_id>/events.csv      frame + one 0/1 column per event channel
    <root>/<trial_id>/labels.csv      frame + state name

Floats are written with 17 significant digits so reading back is exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError, FeatureSequence, StateSequence, StateVocab, TrialBundle

FORMAT_VERSION = 1
STREAM_FILES = {"kin": "kinematics.csv", "vis": "visfeat.csv", "evt": "events.csv"}
LABEL_FILE = "labels.csv"


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_matrix(path: Path, columns: Sequence[str], data: np.ndarray, integer: bool = False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", *columns])
        for t, row in enumerate(data):
            w.writerow([t, *((str(int(v)) for v in row) if integer else (_fmt(v) for v in row))])


def _columns(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i}" for i in range(n)]


def write_trial(trial: TrialBundle, trial_dir, event_channels: Sequence[str] | None = None) -> Path:
    trial_dir = Path(trial_dir)
    trial_dir.mkdir(parents=True, exist_ok=True)
    if trial.vocab is None:
        raise DataError(f"trial {trial.trial_id} has no state vocabulary; cannot write state names")
    n_evt = trial.events.n_features
    columns = {
        "kin": _columns("kin", trial.kinematics.n_features),
        "vis": _columns("vis", trial.vision.n_features),
        "evt": list(event_channels) if event_channels else _columns("evt", n_evt),
    }
    manifest = {
        "format": FORMAT_VERSION,
        "trial_id": trial.trial_id,
        "user_id": trial.user_id,
        "sample_rate_hz": trial.sample_rate_hz,
        "n_frames": trial.n_frames,
        "vocab": list(trial.vocab.names),
        "columns": columns,
    }
    (trial_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _write_matrix(trial_dir / STREAM_FILES["kin"], columns["kin"], trial.kinematics.data)
    _write_matrix(trial_dir / STREAM_FILES["vis"], columns["vis"], trial.vision.data)
    _write_matrix(trial_dir / STREAM_FILES["evt"], columns["evt"], trial.events.data, integer=True)
    with open(trial_dir / LABEL_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "state"])
        for t, name in enumerate(trial.vocab.decode(trial.labels.labels)):
            w.writerow([t, name])
    return trial_dir


def write_dataset(trials: Sequence[TrialBundle], root, task: str = "custom", seed: int | None = None,
                  event_channels: Sequence[str] | None = None) -> Path:
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {root}: {e}") from e
    for t in trials:
        write_trial(t, root / t.trial_id, event_channels)
    index = {
        "format": FORMAT_VERSION,
        "task": task,
        "seed": seed,
        "vocab": list(trials[0].vocab.names) if trials and trials[0].vocab else None,
        "trials": [{"trial_id": t.trial_id, "user_id": t.user_id, "n_frames": t.n_frames} for t in trials],
    }
    (root / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return root


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise DataError(f"{path}: missing")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e


def _require(d: dict, keys: Sequence[str], path: Path):
    missing = [k for k in keys if k not in d]
    if missing:
        raise DataError(f"{path}: missing field(s) {', '.join(missing)}")


def _read_rows(path: Path, header: Sequence[str]):
    if not path.is_file():
        raise DataError(f"{path}: missing")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != ["frame", *header]:
            raise DataError(f"{path}:1: header {first} does not match manifest columns")
        for row in reader:
            lineno = reader.line_num
            if len(row) != len(header) + 1:
                raise DataError(f"{path}:{lineno}: expected {len(header) + 1} fields, got {len(row)}")
            yield lineno, row


def _read_matrix(path: Path, header: Sequence[str], n_frames: int, binary: bool = False) -> np.ndarray:
    out = np.empty((n_frames, len(header)))
    t = -1
    for lineno, row in _read_rows(path, header):
        t += 1
        if t >= n_frames or row[0] != str(t):
            raise DataError(f"{path}:{lineno}: expected frame {t} of {n_frames}, got {row[0]!r}")
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
        if not np.all(np.isfinite(vals)):
            raise DataError(f"{path}:{lineno}: non-finite value")
        if binary and any(v not in (0.0, 1.0) for v in vals):
            raise DataError(f"{path}:{lineno}: event values must be 0 or 1")
        out[t] = vals
    if t + 1 != n_frames:
        raise DataError(f"{path}: {t + 1} frames, manifest says {n_frames}")
    return out


def read_trial(trial_dir) -> TrialBundle:
    trial_dir = Path(trial_dir)
    mpath = trial_dir / "manifest.json"
    m = _read_json(mpath)
    _require(m, ("trial_id", "user_id", "sample_rate_hz", "n_frames", "vocab", "columns"), mpath)
    _require(m["columns"], ("kin", "vis", "evt"), mpath)
    try:
        vocab = StateVocab(tuple(m["vocab"]))
    except ValueError as e:
        raise DataError(f"{mpath}: {e}") from e
    T, rate = int(m["n_frames"]), float(m["sample_rate_hz"])
    streams = {mod: _read_matrix(trial_dir / fname, m["columns"][mod], T, binary=mod == "evt")
               for mod, fname in STREAM_FILES.items()}
    lpath = trial_dir / LABEL_FILE
    labels = np.empty(T, dtype=np.int64)
    t = -1
    for lineno, row in _read_rows(lpath, ["state"]):
        t += 1
        if t >= T or row[0] != str(t):
            raise DataError(f"{lpath}:{lineno}: expected frame {t} of {T}, got {row[0]!r}")
        try:
            labels[t] = vocab.index(row[1])
        except (KeyError, ValueError):
            raise DataError(f"{lpath}:{lineno}: unknown state {row[1]!r}") from None
    if t + 1 != T:
        raise DataError(f"{lpath}: {t + 1} frames, manifest says {T}")
    try:
        return TrialBundle(FeatureSequence(streams["kin"], rate), FeatureSequence(streams["vis"], rate),
                           FeatureSequence(streams["evt"], rate), StateSequence(labels, vocab.size),
                           str(m["user_id"]), str(m["trial_id"]), vocab)
    except ValueError as e:
        raise DataError(f"{trial_dir}: {e}") from e


def read_index(root) -> dict:
    path = Path(root) / "index.json"
    index = _read_json(path)
    _require(index, ("trials",), path)
    return index


def read_dataset(root) -> list[TrialBundle]:
    root = Path(root)
    return [read_trial(root / entry["trial_id"]) for entry in read_index(root)["trials"]]


def event_channel_names(root) -> list[str]:
    index = read_index(root)
    if not index["trials"]:
        return []
    m = _read_json(Path(root) / index["trials"][0]["trial_id"] / "manifest.json")
    return list(m["columns"]["evt"])
