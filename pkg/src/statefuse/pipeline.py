"""Component models behind one fit/predict/save surface.

A component is one single-source labeler (``tcn-kin``, ``tcn-vis``,
``lstm-kin``, ``events``) bound to the modality it reads. The LOUO harness
and the command line both go through this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, events, lstm, tcn
from .core import ConfigError, TrialBundle, substream

COMPONENT_KINDS = {
    "tcn-kin": ("tcn", "kin"),
    "tcn-vis": ("tcn", "vis"),
    "lstm-kin": ("lstm", "kin"),
    "events": ("events", "evt"),
}


@dataclass
class ModelSpec:
    """What to build for one component: architecture and training settings."""

    name: str
    kind: str
    modality: str
    config: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def named(cls, name: str, config=None, train=None) -> "ModelSpec":
        if name not in COMPONENT_KINDS:
            raise ConfigError(f"unknown component {name!r}; expected one of {sorted(COMPONENT_KINDS)}")
        kind, modality = COMPONENT_KINDS[name]
        return cls(name, kind, modality, dict(config or {}), dict(train or {}))

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "modality": self.modality,
                "config": self.config, "train": self.train}

    def for_mode(self, mode: str) -> "ModelSpec":
        """Copy with the TCN padding mode set; other kinds are always causal."""
        if mode not in ("causal", "non-causal"):
            raise ConfigError(f"mode must be 'causal' or 'non-causal', got {mode!r}")
        if self.kind != "tcn":
            return self
        return ModelSpec(self.name, self.kind, self.modality, {**self.config, "causal": mode == "causal"},
                         dict(self.train))


def default_specs(mode: str = "causal", kernel_seconds: float = 3.4) -> dict[str, ModelSpec]:
    """Component settings used for desk-scale synthetic runs.

    Both TCNs are two layers deep and back-propagate through the normaliser
    max ("full"): on 2000-frame trials the stop-gradient rule lets nearly
    dead frames blow gradients up by 1/eps and training stalls.
    """
    causal = mode == "causal"
    tcn_cfg = {"kernel_seconds": kernel_seconds, "causal": causal, "norm_grad": "full"}
    return {
        "tcn-kin": ModelSpec.named("tcn-kin", {**tcn_cfg, "filters": [64, 96]},
                                   {"epochs": 30, "learning_rate": 1e-3}),
        "tcn-vis": ModelSpec.named("tcn-vis", {**tcn_cfg, "filters": [32, 64]},
                                   {"epochs": 30, "learning_rate": 1e-3}),
        "lstm-kin": ModelSpec.named("lstm-kin", {"n_layers": 1, "hidden_units": 64, "dropout": 0.0,
                                                 "learning_rate": 1.0},
                                    {"epochs": 30, "batch_size": 16}),
        "events": ModelSpec.named("events", {}, {"max_iters": 200, "val_fraction": 0.2}),
    }


def modality_stream(trial: TrialBundle, modality: str) -> np.ndarray:
    return trial.stream(modality).data


class Component:
    """A fitted (or fittable) single-source model plus its spec."""

    def __init__(self, spec: ModelSpec, model=None):
        self.spec = spec
        self.model = model

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def causal(self) -> bool:
        return bool(getattr(self.model, "causal", True))

    def build(self, n_features: int, n_states: int, sample_rate_hz: float, seed: int):
        cfg = dict(self.spec.config)
        if self.spec.kind == "tcn":
            conf = tcn.TcnConfig(n_features=n_features, n_states=n_states,
                                 sample_rate_hz=sample_rate_hz, **cfg)
            self.model = tcn.TCN(conf, seed)
        elif self.spec.kind == "lstm":
            self.model = lstm.LSTM(lstm.LstmConfig(n_features=n_features, n_states=n_states, **cfg), seed)
        elif self.spec.kind != "events":
            raise ConfigError(f"unknown component kind {self.spec.kind!r}")
        return self

    def fit(self, trials: Sequence[TrialBundle], n_states: int, seed: int = 0):
        """Train on ``trials``; returns the per-epoch loss curve (empty for events)."""
        if not trials:
            raise ValueError("empty training set")
        mod = self.spec.modality
        pairs = [(modality_stream(t, mod), t.labels.labels) for t in trials]
        opts = dict(self.spec.train)
        if self.spec.kind == "events":
            X = np.vstack([p[0] for p in pairs])
            y = np.concatenate([p[1] for p in pairs])
            rng = substream(seed, f"{self.name}/select")
            val_fraction = opts.get("val_fraction", 0.2)
            is_val = rng.random(y.size) < val_fraction
            cands = [events.EventClassifier(**c) for c in opts["candidates"]] if "candidates" in opts \
                else events.default_candidates()
            self.model = events.select_ensemble(cands, X[~is_val], y[~is_val], X[is_val], y[is_val], rng,
                                                n_states, max_iters=opts.get("max_iters", 200),
                                                early_stop=opts.get("early_stop", 1e-6))
            return []
        self.build(pairs[0][0].shape[1], n_states, trials[0].sample_rate_hz,
                   int(substream(seed, f"{self.name}/init").integers(2**31)))
        train_seed = int(substream(seed, f"{self.name}/train").integers(2**31))
        if self.spec.kind == "tcn":
            o = tcn.TcnTrainOptions(seed=train_seed, **opts)
            _, losses = tcn.train(self.model, pairs, o)
        else:
            o = lstm.LstmTrainOptions(seed=train_seed, **opts)
            _, losses = lstm.train(self.model, pairs, o)
        return losses

    def predict(self, trial_or_stream) -> np.ndarray:
        x = trial_or_stream
        if isinstance(trial_or_stream, TrialBundle):
            x = modality_stream(trial_or_stream, self.spec.modality)
        if self.spec.kind == "events":
            return self.model.predict_proba(x)
        return self.model.forward(x)

    def save(self, path, meta=None) -> Path:
        meta = {**(meta or {}), "component": self.spec.to_dict()}
        return self.model.save(path, meta)

    @classmethod
    def load(cls, path) -> "Component":
        header, arrays = checkpoint.load(path)
        spec_d = header.get("meta", {}).get("component")
        if spec_d is None:
            raise ConfigError(f"{path}: checkpoint carries no component description")
        spec = ModelSpec(**spec_d)
        kind = header["kind"]
        if kind == "tcn":
            model = tcn.TCN.from_arrays(header["config"], arrays)
        elif kind == "lstm":
            model = lstm.LSTM.from_arrays(header["config"], arrays)
        elif kind == "events":
            model = events.EnsembleModel.from_arrays(header["config"], arrays)
        else:
            raise ConfigError(f"{path}: {kind!r} is not a component checkpoint")
        return cls(spec, model)

    def input_dim(self) -> int | None:
        cfg = getattr(self.model, "config", None)
        return getattr(cfg, "n_features", None)
