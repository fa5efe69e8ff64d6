"""Domain types, run-length segmentation, LOUO splits and seeded sub-streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Hashable, NamedTuple, Sequence

import numpy as np


class StatefuseError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1


class ConfigError(StatefuseError):
    exit_code = 2


class DataError(StatefuseError):
    exit_code = 3


class NumericError(StatefuseError):
    exit_code = 4


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StateVocab:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("a state vocabulary needs at least 2 states")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate state names in {names}")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(str(name))
        except ValueError:
            raise KeyError(f"unknown state {name!r}") from None

    def encode(self, names: Sequence[str]) -> np.ndarray:
        lookup = {n: i for i, n in enumerate(self.names)}
        try:
            return np.array([lookup[str(n)] for n in names], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown state {exc.args[0]!r}") from None

    def decode(self, labels: Sequence[int]) -> list[str]:
        return [self.names[int(i)] for i in labels]


@dataclass(frozen=True)
class FeatureSequence:
    """A time-major ``T x N`` stream for one modality of one trial."""

    data: np.ndarray
    sample_rate_hz: float = 10.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"feature data must be T x N with T, N >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature data contains non-finite values")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_features(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.n_frames


@dataclass(frozen=True)
class StateSequence:
    labels: np.ndarray
    n_states: int | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ValueError("labels must be one-dimensional")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.n_states is not None and labels.size and labels.max() >= self.n_states:
            raise ValueError(f"label {labels.max()} out of range for {self.n_states} states")
        object.__setattr__(self, "labels", _frozen(labels))

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class TrialBundle:
    """Synchronized kinematics, vision and event streams of one trial."""

    kinematics: FeatureSequence
    vision: FeatureSequence
    events: FeatureSequence
    labels: StateSequence
    user_id: str
    trial_id: str
    vocab: StateVocab | None = field(default=None, compare=False)

    def __post_init__(self):
        t = len(self.labels)
        streams = {"kinematics": self.kinematics, "vision": self.vision, "events": self.events}
        for name, s in streams.items():
            if s.n_frames != t:
                raise ValueError(f"{name} has {s.n_frames} frames, labels have {t}")
        rates = {s.sample_rate_hz for s in streams.values()}
        if len(rates) != 1:
            raise ValueError(f"streams disagree on sample rate: {sorted(rates)}")
        ev = self.events.data
        if not np.all((ev == 0) | (ev == 1)):
            raise ValueError("event stream must be binary")

    @property
    def n_frames(self) -> int:
        return len(self.labels)

    @property
    def sample_rate_hz(self) -> float:
        return self.kinematics.sample_rate_hz

    def stream(self, modality: str) -> FeatureSequence:
        key = {"kin": "kinematics", "vis": "vision", "evt": "events"}.get(modality, modality)
        return getattr(self, key)


class Segment(NamedTuple):
    state: int
    start: int
    length: int


def segment_runs(labels) -> list[Segment]:
    """Run-length encode a label sequence into maximal constant segments."""
    labels = np.asarray(labels.labels if isinstance(labels, StateSequence) else labels)
    if labels.size == 0:
        raise ValueError("empty sequence")
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [labels.size]))
    return [Segment(int(labels[s]), int(s), int(e - s)) for s, e in zip(starts, ends)]


def decode_runs(segments: Sequence[Segment]) -> np.ndarray:
    if not segments:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.full(s.length, s.state, dtype=np.int64) for s in segments])


def louo_splits(trials: Sequence[TrialBundle], user_of=None) -> list[tuple[list, list]]:
    """Leave-one-user-out folds, one per distinct user in first-seen order.

    ``user_of`` extracts the user key; it defaults to ``trial.user_id``.
    """
    user_of = user_of or (lambda tr: tr.user_id)
    users: list[Hashable] = []
    for tr in trials:
        u = user_of(tr)
        if u not in users:
            users.append(u)
    if len(users) < 2:
        raise ValueError("LOUO requires ≥2 users")
    folds = []
    for u in users:
        test = [tr for tr in trials if user_of(tr) == u]
        train = [tr for tr in trials if user_of(tr) != u]
        folds.append((train, test))
    return folds


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component, e.g. ``"simgen/trial7"``.

    The same (root_seed, name) pair always yields the same stream.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype="<u4").tolist()
    return np.random.default_rng(np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, *words]))


def check_prob_series(probs: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("a probability series must be T x b")
    if np.any(probs < -atol) or np.any(probs > 1 + atol):
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=atol, rtol=0):
        raise ValueError("probability rows must sum to 1")
    return probs
