"""Weighted-vote fusion of per-model state distributions.

Each model ``i`` gets a weight per state ``j`` from its diagnostic odds
ratio on that state, ``TP*TN / (FP*FN + eps)``; weights are normalised so
every state's column sums to one across models. The fused score of state
``j`` is ``sum_i alpha[i, j] * Y_i[t, j]`` and the decision is its argmax.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint

OR_EPS = 1e-5

FUSION_KV = ("tcn-kin", "lstm-kin", "tcn-vis")
FUSION_KVE = FUSION_KV + ("events",)


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest counts, each an ``a x b`` integer array (models x states)."""

    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def n_models(self) -> int:
        return self.tp.shape[0]

    @property
    def n_states(self) -> int:
        return self.tp.shape[1]


def _labels(x) -> np.ndarray:
    return np.asarray(getattr(x, "labels", x), dtype=np.int64)


def confusion_counts(preds: Sequence[np.ndarray], gt, n_states: int | None = None) -> ConfusionCounts:
    """Per model, compare frame-wise argmax decisions with ``gt`` one-vs-rest."""
    gt = _labels(gt)
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    b = n_states or preds[0].shape[1]
    shape = (len(preds), b)
    tp, tn, fp, fn = (np.zeros(shape, dtype=np.int64) for _ in range(4))
    T = gt.shape[0]
    for i, p in enumerate(preds):
        if p.shape[0] != T:
            raise ValueError(f"model {i} has {p.shape[0]} frames, ground truth has {T}")
        decided = p.argmax(axis=1)
        hit = np.bincount(gt[decided == gt], minlength=b)[:b]
        n_pred = np.bincount(decided, minlength=b)[:b]
        n_true = np.bincount(gt, minlength=b)[:b]
        tp[i] = hit
        fp[i] = n_pred - hit
        fn[i] = n_true - hit
        tn[i] = T - tp[i] - fp[i] - fn[i]
    return ConfusionCounts(tp, tn, fp, fn)


def merge_counts(counts: Sequence[ConfusionCounts]) -> ConfusionCounts:
    return ConfusionCounts(*(sum(getattr(c, f) for c in counts) for f in ("tp", "tn", "fp", "fn")))


def odds_ratio_weights(counts: ConfusionCounts, eps: float = OR_EPS) -> np.ndarray:
    """Column-normalised diagnostic-odds-ratio weight matrix (models x states).

    A column whose raw odds ratios are all zero falls back to uniform
    weights, with a warning.
    """
    tp, tn, fp, fn = (np.asarray(getattr(counts, f), dtype=np.float64) for f in ("tp", "tn", "fp", "fn"))
    raw = tp * tn / (fp * fn + eps)
    col = raw.sum(axis=0)
    alpha = np.empty_like(raw)
    dead = col <= 0
    if dead.any():
        warnings.warn(f"states {np.flatnonzero(dead).tolist()} have zero odds ratio for every model; "
                      "using uniform weights")
        alpha[:, dead] = 1.0 / raw.shape[0]
    alpha[:, ~dead] = raw[:, ~dead] / col[~dead]
    return alpha


def fuse(preds: Sequence[np.ndarray], alpha: np.ndarray) -> np.ndarray:
    """Weighted vote ``P[t, j] = sum_i alpha[i, j] * Y_i[t, j]``.

    Rows of the result need not sum to one; they are left as they are.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    Y = np.stack([np.asarray(p, dtype=np.float64) for p in preds])
    if len(preds) < 2:
        raise ValueError("fusion needs at least two models")
    if alpha.shape != (Y.shape[0], Y.shape[2]):
        raise ValueError(f"alpha has shape {alpha.shape}, expected {(Y.shape[0], Y.shape[2])}")
    # explicit per-model accumulation keeps each frame independent of the others
    P = np.zeros(Y.shape[1:])
    for i in range(Y.shape[0]):
        P += alpha[i] * Y[i]
    return P


def decide(P) -> np.ndarray:
    """Frame-wise argmax; exact ties resolve to the lowest state index."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    return P.argmax(axis=1)


@dataclass
class FusionModel:
    """Named component models plus their weight matrix."""

    model_names: tuple
    alpha: np.ndarray
    state_names: tuple | None = None

    def fuse(self, preds: Sequence[np.ndarray]) -> np.ndarray:
        return fuse(preds, self.alpha)

    def decide(self, preds: Sequence[np.ndarray]) -> np.ndarray:
        return decide(self.fuse(preds))

    def save(self, path, meta=None):
        config = {"models": list(self.model_names),
                  "states": list(self.state_names) if self.state_names else None}
        return checkpoint.save(path, "fusion", config, {"alpha": self.alpha}, ["weighted-vote"], meta)

    @classmethod
    def load(cls, path):
        header, arrays = checkpoint.load(path)
        if header["kind"] != "fusion":
            raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not a fusion model")
        states = header["config"].get("states")
        return cls(tuple(header["config"]["models"]), arrays["alpha"], tuple(states) if states else None)


def fit_fusion(model_names: Sequence[str], preds: dict, gts: Sequence, n_states: int,
               state_names=None) -> FusionModel:
    """Weights from training-set predictions; ``preds[name]`` lists one series per trial."""
    per_trial = [confusion_counts([preds[n][k] for n in model_names], gts[k], n_states)
                 for k in range(len(gts))]
    alpha = odds_ratio_weights(merge_counts(per_trial))
    return FusionModel(tuple(model_names), alpha, tuple(state_names) if state_names else None)


def write_alpha_csv(path, alpha: np.ndarray, model_names: Sequence[str], state_names: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", *state_names])
        for name, row in zip(model_names, alpha):
            w.writerow([name, *(repr(float(v)) for v in row)])
    return path
