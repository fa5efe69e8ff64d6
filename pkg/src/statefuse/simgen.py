"""Finite-state-machine simulator for synchronized multi-modal trials.

A task FSM is walked with log-normal dwell times to produce a label path.
Each state then emits kinematics (template + drift + noise), vision
features (centroid + noise, with camera-motion bursts) and binary events
(pattern + bit flips). A state whose ``modality_mask`` omits a modality
emits that modality from a shared confusable pool instead, so it can only
be told apart through the remaining modalities.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import (ConfigError, DataError, FeatureSequence, StateSequence, StateVocab,
                   TrialBundle, segment_runs, substream)

MODALITIES = ("kin", "vis", "evt")
DEFAULT_DIMS = (19, 32, 6)
DEFAULT_RATE_HZ = 10.0
BUILTIN_TASKS = ("suturing", "rious", "benchmark")


@dataclass(frozen=True)
class TaskFsm:
    vocab: StateVocab
    start_state: int
    accepting: frozenset
    transitions: Mapping[int, tuple]

    def __post_init__(self):
        b = self.vocab.size
        trans = {int(s): tuple((int(n), float(p)) for n, p in self.transitions.get(s, ()))
                 for s in range(b)}
        object.__setattr__(self, "transitions", trans)
        object.__setattr__(self, "accepting", frozenset(int(a) for a in self.accepting))
        if not 0 <= self.start_state < b:
            raise ValueError("start state out of range")
        if not self.accepting:
            raise ValueError("an FSM needs at least one accepting state")
        for s, edges in trans.items():
            total = sum(p for _, p in edges)
            if any(p < 0 or not 0 <= n < b for n, p in edges):
                raise ValueError(f"bad edge out of {self.vocab.names[s]}")
            if s in self.accepting:
                if total > 1 + 1e-9:
                    raise ValueError(f"out-probabilities of {self.vocab.names[s]} exceed 1")
            elif abs(total - 1.0) > 1e-9:
                raise ValueError(f"out-probabilities of {self.vocab.names[s]} sum to {total}, not 1")
        reach = self._reachable(self.start_state)
        if len(reach) != b:
            missing = [self.vocab.names[s] for s in range(b) if s not in reach]
            raise ValueError(f"states unreachable from start: {missing}")
        for s in range(b):
            if not self._reachable(s) & self.accepting:
                raise ValueError(f"no accepting state reachable from {self.vocab.names[s]}")

    def _reachable(self, s0: int) -> set:
        seen, todo = {s0}, deque([s0])
        while todo:
            s = todo.popleft()
            for n, p in self.transitions[s]:
                if p > 0 and n not in seen:
                    seen.add(n)
                    todo.append(n)
        return seen

    def stop_prob(self, s: int) -> float:
        if s not in self.accepting:
            return 0.0
        return max(0.0, 1.0 - sum(p for _, p in self.transitions[s]))


@dataclass(frozen=True)
class StateProfile:
    mean_duration_s: float
    duration_jitter: float
    kin_template: np.ndarray
    vis_centroid: np.ndarray
    event_pattern: np.ndarray
    modality_mask: frozenset = frozenset(MODALITIES)

    def __post_init__(self):
        if not self.mean_duration_s > 0:
            raise ValueError("mean_duration_s must be positive")
        if self.duration_jitter < 0:
            raise ValueError("duration_jitter must be non-negative")
        ev = np.asarray(self.event_pattern, dtype=np.float64)
        if not np.all((ev == 0) | (ev == 1)):
            raise ValueError("event_pattern must be binary")
        mask = frozenset(self.modality_mask)
        if not mask <= set(MODALITIES):
            raise ValueError(f"unknown modality in mask {sorted(mask)}")
        object.__setattr__(self, "modality_mask", mask)
        object.__setattr__(self, "event_pattern", ev)
        object.__setattr__(self, "kin_template", np.asarray(self.kin_template, dtype=np.float64))
        object.__setattr__(self, "vis_centroid", np.asarray(self.vis_centroid, dtype=np.float64))


@dataclass(frozen=True)
class ConfusablePool:
    """Shared emissions for states that are not distinguishable in a modality."""

    kin: np.ndarray
    vis: np.ndarray
    evt: np.ndarray


@dataclass(frozen=True)
class NoiseSpec:
    kin_sigma: float = 0.0
    vis_sigma: float = 0.0
    event_flip_prob: float = 0.0
    camera_motion_rate: float = 0.0
    kin_drift: float = 0.0
    burst_duration_s: float = 1.5
    burst_sigma: float = 3.0

    def __post_init__(self):
        for name in ("kin_sigma", "vis_sigma", "camera_motion_rate", "kin_drift", "burst_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.event_flip_prob < 0.5:
            raise ValueError("event_flip_prob must lie in [0, 0.5)")
        if not self.burst_duration_s > 0:
            raise ValueError("burst_duration_s must be positive")


NOISE_PRESETS = {
    "clean": NoiseSpec(),
    "benchmark": NoiseSpec(kin_sigma=0.5, vis_sigma=0.5, event_flip_prob=0.02,
                           camera_motion_rate=2.0, kin_drift=0.3),
}


@dataclass
class TaskSpec:
    """Everything loaded from an FSM data file."""

    name: str
    fsm: TaskFsm
    states: list = field(default_factory=list)
    pool_event_pattern: np.ndarray | None = None
    event_channels: list = field(default_factory=list)


# -- FSM data files -------------------------------------------------------


def _parse_fsm(doc: dict, source: str) -> TaskSpec:
    try:
        states = doc["states"]
        vocab = StateVocab(tuple(s["name"] for s in states))
        idx = {n: i for i, n in enumerate(vocab.names)}
        out: dict[int, list] = {i: [] for i in range(vocab.size)}
        unweighted: dict[int, list] = {i: [] for i in range(vocab.size)}
        for e in doc.get("edges", []):
            s, n = idx[e["from"]], idx[e["to"]]
            if "p" in e:
                out[s].append((n, float(e["p"])))
            else:
                unweighted[s].append(n)
        accepting = {idx[a] for a in doc["accepting"]}
        stop = {idx[k]: float(v) for k, v in doc.get("stop_prob", {}).items()}
        for s in range(vocab.size):
            rest = 1.0 - sum(p for _, p in out[s])
            slots = len(unweighted[s])
            if s in accepting:
                if s in stop:
                    rest -= stop[s]
                elif slots:
                    # stopping counts as one more uniform out-edge
                    rest *= slots / (slots + 1)
            if slots:
                out[s].extend((n, rest / slots) for n in unweighted[s])
        fsm = TaskFsm(vocab, idx[doc["start"]], frozenset(accepting), out)
    except KeyError as exc:
        raise DataError(f"{source}: missing or unknown key {exc}") from None
    except ValueError as exc:
        raise DataError(f"{source}: {exc}") from None
    pool = doc.get("pool_event_pattern")
    return TaskSpec(doc.get("task", "custom"), fsm, states,
                    None if pool is None else np.asarray(pool, dtype=np.float64),
                    list(doc.get("event_channels", [])))


def load_task(path_or_name) -> TaskSpec:
    """Load a task file by path, or a shipped task by name (see ``BUILTIN_TASKS``)."""
    if str(path_or_name) in BUILTIN_TASKS:
        text = resources.files("statefuse.data").joinpath(f"{path_or_name}.json").read_text()
        return _parse_fsm(json.loads(text), f"{path_or_name}.json")
    path = Path(path_or_name)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: FSM file not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno}") from None
    return _parse_fsm(doc, str(path))


def default_fsm(task: str) -> TaskFsm:
    if task not in ("suturing", "rious"):
        raise ValueError(f"unknown task {task!r}; expected 'suturing' or 'rious'")
    return load_task(task).fsm


def build_profiles(spec: TaskSpec, dims=DEFAULT_DIMS, seed: int = 0,
                   template_scale: float = 1.0) -> tuple[dict, ConfusablePool]:
    """Per-state profiles plus the confusable pool for a loaded task.

    Templates and centroids missing from the file are drawn from
    ``substream(seed, "simgen/templates")``.
    """
    n_k, n_v, n_e = dims
    rng = substream(seed, "simgen/templates")
    profiles = {}
    for i, st in enumerate(spec.states):
        kin = rng.normal(0.0, template_scale, n_k)
        vis = rng.normal(0.0, template_scale, n_v)
        kin = np.asarray(st.get("kin_template", kin), dtype=np.float64)
        vis = np.asarray(st.get("vis_centroid", vis), dtype=np.float64)
        ev = np.zeros(n_e)
        pattern = np.asarray(st.get("event_pattern", []), dtype=np.float64)
        if pattern.size > n_e:
            raise DataError(f"state {st['name']}: {pattern.size} event bits but N_e={n_e}")
        ev[:pattern.size] = pattern
        profiles[i] = StateProfile(float(st["mean_duration_s"]), float(st.get("duration_jitter", 0.25)),
                                   kin, vis, ev, frozenset(st.get("modality_mask", MODALITIES)))
    pool_ev = np.zeros(n_e)
    if spec.pool_event_pattern is not None:
        pool_ev[:spec.pool_event_pattern.size] = spec.pool_event_pattern
    pool = ConfusablePool(rng.normal(0.0, template_scale, n_k), rng.normal(0.0, template_scale, n_v), pool_ev)
    return profiles, pool


# -- sampling ---------------------------------------------------------------


def _dwell_frames(profile: StateProfile, rate_hz: float, rng: np.random.Generator) -> int:
    mean, cv = profile.mean_duration_s, profile.duration_jitter
    if cv == 0:
        seconds = mean
    else:
        sigma2 = np.log1p(cv * cv)
        seconds = rng.lognormal(np.log(mean) - sigma2 / 2, np.sqrt(sigma2))
    return max(1, int(np.floor(seconds * rate_hz + 0.5)))


def sample_state_path(fsm: TaskFsm, profiles: Mapping[int, StateProfile], rng_seed,
                      max_frames: int, rate_hz: float = DEFAULT_RATE_HZ) -> StateSequence:
    """Walk the FSM from its start state with log-normal dwell times.

    Stops at an accepting state (with that state's stop probability) or
    when ``max_frames`` frames have been produced.
    """
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    for s in fsm._reachable(fsm.start_state):
        if s not in profiles:
            raise ValueError(f"missing profile for state {fsm.vocab.names[s]}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    labels: list[int] = []
    s = fsm.start_state
    while True:
        n = _dwell_frames(profiles[s], rate_hz, rng)
        labels.extend([s] * min(n, max_frames - len(labels)))
        if len(labels) >= max_frames:
            break
        edges = fsm.transitions[s]
        stop = fsm.stop_prob(s)
        if not edges:
            break
        probs = np.array([p for _, p in edges] + [stop])
        choice = rng.choice(len(probs), p=probs / probs.sum())
        if choice == len(edges):
            break
        s = edges[choice][0]
    return StateSequence(np.array(labels, dtype=np.int64), fsm.vocab.size)


def emit_trial(path: StateSequence, profiles: Mapping[int, StateProfile], noise: NoiseSpec,
               dims=DEFAULT_DIMS, rng_seed=0, pool: ConfusablePool | None = None,
               rate_hz: float = DEFAULT_RATE_HZ, user_id: str = "U1", trial_id: str = "T1",
               vocab: StateVocab | None = None) -> TrialBundle:
    """Render the three synchronized streams for a label path."""
    n_k, n_v, n_e = dims
    if min(dims) < 1:
        raise ValueError("dimensions must be positive")
    for s, p in profiles.items():
        if p.kin_template.size != n_k or p.vis_centroid.size != n_v or p.event_pattern.size != n_e:
            raise ValueError(f"profile of state {s} does not match dims {tuple(dims)}")
    if pool is None:
        pool = ConfusablePool(np.mean([p.kin_template for p in profiles.values()], axis=0),
                              np.mean([p.vis_centroid for p in profiles.values()], axis=0),
                              np.zeros(n_e))
    if pool.kin.size != n_k or pool.vis.size != n_v or pool.evt.size != n_e:
        raise ValueError("confusable pool does not match dims")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    labels = np.asarray(path.labels)
    T = labels.size
    kin = np.empty((T, n_k))
    vis = np.empty((T, n_v))
    evt = np.empty((T, n_e))
    for seg in segment_runs(labels):
        prof = profiles[seg.state]
        sl = slice(seg.start, seg.start + seg.length)
        mask = prof.modality_mask
        kin[sl] = prof.kin_template if "kin" in mask else pool.kin
        vis[sl] = prof.vis_centroid if "vis" in mask else pool.vis
        evt[sl] = prof.event_pattern if "evt" in mask else pool.evt
        if noise.kin_drift > 0:
            ramp = np.linspace(-0.5, 0.5, seg.length)[:, None]
            kin[sl] += ramp * rng.normal(0.0, noise.kin_drift, n_k)
    if noise.kin_sigma > 0:
        kin += rng.normal(0.0, noise.kin_sigma, kin.shape)
    if noise.vis_sigma > 0:
        vis += rng.normal(0.0, noise.vis_sigma, vis.shape)
    if noise.camera_motion_rate > 0:
        n_bursts = rng.poisson(noise.camera_motion_rate * T / rate_hz / 60.0)
        width = max(1, int(round(noise.burst_duration_s * rate_hz)))
        for start in np.sort(rng.integers(0, T, n_bursts)):
            stop = min(T, start + width)
            vis[start:stop] = rng.normal(0.0, noise.burst_sigma, (stop - start, n_v))
    if noise.event_flip_prob > 0:
        flips = rng.random(evt.shape) < noise.event_flip_prob
        evt = np.where(flips, 1.0 - evt, evt)
    return TrialBundle(FeatureSequence(kin, rate_hz), FeatureSequence(vis, rate_hz),
                       FeatureSequence(evt, rate_hz), path, str(user_id), str(trial_id), vocab)


def generate_trials(spec: TaskSpec, n_trials: int, n_users: int, seed: int, noise: NoiseSpec,
                    dims=DEFAULT_DIMS, rate_hz: float = DEFAULT_RATE_HZ, max_frames: int = 2000,
                    profiles=None, pool=None) -> list[TrialBundle]:
    """Generate ``n_trials`` trials assigned round-robin to ``n_users`` users.

    Trial ``i`` draws from its own ``simgen/trial{i}`` sub-stream.
    """
    if n_trials < 1:
        raise ConfigError("need at least one trial")
    if not 1 <= n_users <= n_trials:
        raise ConfigError("need 1 <= users <= trials")
    if profiles is None:
        profiles, pool = build_profiles(spec, dims, seed)
    trials = []
    for i in range(n_trials):
        rng = substream(seed, f"simgen/trial{i}")
        path = sample_state_path(spec.fsm, profiles, rng, max_frames, rate_hz)
        trials.append(emit_trial(path, profiles, noise, dims, rng, pool, rate_hz,
                                 user_id=f"U{i % n_users + 1}", trial_id=f"T{i + 1:03d}",
                                 vocab=spec.fsm.vocab))
    return trials
