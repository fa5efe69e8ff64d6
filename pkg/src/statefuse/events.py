"""Frame-wise state classifiers on binary event vectors.

Three classifier families (random forest, Crammer-Singer linear SVM, ridge)
and the ensemble selection loop: repeatedly fit every candidate on a
bootstrap of the training frames, record the candidate with the best
macro one-vs-rest ROC AUC on validation frames, and keep the three most
frequently recorded ones. The ensemble predicts the mean of the members'
class distributions.

Event frames take few distinct values, so all fitting works on the unique
rows of the design matrix with per-row class counts as sample weights.
"""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .nn import softmax

log = logging.getLogger(__name__)

KINDS = ("random_forest", "linear_svm", "ridge")


def _compress(X, y, n_classes):
    """Unique rows of ``X`` and the per-row class count matrix."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    uniq, inverse = np.unique(X, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse * n_classes + y, minlength=uniq.shape[0] * n_classes)
    return uniq, counts.reshape(uniq.shape[0], n_classes).astype(np.float64), inverse


def _predict_unique(X, fn):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    uniq, inverse = np.unique(X, axis=0, return_inverse=True)
    return fn(uniq)[inverse.reshape(-1)]


# -- random forest ----------------------------------------------------------


class _TreeBuilder:
    def __init__(self, X, min_samples_split, max_features, rng):
        self.X = X
        self.min_samples_split = min_samples_split
        self.max_features = max_features
        self.rng = rng
        self.feature, self.threshold, self.left, self.right, self.label = [], [], [], [], []

    def _leaf(self, counts):
        node = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.label.append(int(np.argmax(counts)))
        return node

    def _best_split(self, rows, W):
        """Best (feature, threshold) by weighted Gini over a random feature order.

        At least ``max_features`` features are considered; if none of them
        admits a split, the search continues down the order until one does.
        """
        X = self.X[rows]
        n, d = X.shape
        perm = self.rng.permutation(d)
        Xp = X[:, perm]
        order = np.argsort(Xp, axis=0, kind="stable")
        vals = Xp[order, np.arange(d)]
        cum = np.cumsum(W[order], axis=0)  # (n, d, b)
        left = cum[:-1]
        right = cum[-1] - left
        nl, nr = left.sum(axis=2), right.sum(axis=2)
        # weighted child Gini = 1 - (sum l^2 / n_l + sum r^2 / n_r) / n
        purity = (np.einsum("ijk,ijk->ij", left, left) / np.maximum(nl, 1e-300)
                  + np.einsum("ijk,ijk->ij", right, right) / np.maximum(nr, 1e-300))
        score = 1.0 - purity / W.sum()
        valid = vals[1:] != vals[:-1]
        if not valid.any():
            return None
        score = np.where(valid, score, np.inf)
        best_per_feature = score.min(axis=0)
        usable = np.isfinite(best_per_feature)
        first_usable = int(np.argmax(usable))
        considered = max(self.max_features, first_usable + 1)
        scores = np.round(best_per_feature[:considered], 12)
        k = int(np.argmin(scores))
        j = int(np.argmin(score[:, k]))
        thr = 0.5 * (vals[j, k] + vals[j + 1, k])
        return scores[k], int(perm[k]), float(thr)

    def build(self, rows, W):
        counts = W.sum(axis=0)
        if counts.sum() < self.min_samples_split or np.count_nonzero(counts) <= 1:
            return self._leaf(counts)
        split = self._best_split(rows, W)
        if split is None:
            return self._leaf(counts)
        _, f, thr = split
        go_left = self.X[rows, f] <= thr
        node = len(self.feature)
        self.feature.append(f)
        self.threshold.append(thr)
        self.left.append(-1)
        self.right.append(-1)
        self.label.append(-1)
        self.left[node] = self.build(rows[go_left], W[go_left])
        self.right[node] = self.build(rows[~go_left], W[~go_left])
        return node

    def arrays(self):
        return (np.array(self.feature), np.array(self.threshold), np.array(self.left),
                np.array(self.right), np.array(self.label))


@dataclass
class RandomForest:
    n_trees: int = 100
    min_samples_split: int = 2
    n_classes: int = 2
    bootstrap: bool | None = None
    trees: list = field(default_factory=list, repr=False)

    kind = "random_forest"

    def fit(self, X, y, rng: np.random.Generator, sample_counts=None):
        uniq, C, _ = _compress(X, y, self.n_classes)
        if sample_counts is not None:
            C = sample_counts
        if np.count_nonzero(C.sum(axis=0)) < 2:
            warnings.warn("single-class training data; the forest predicts a constant class")
        n = C.sum()
        cell_p = (C / n).reshape(-1)
        max_features = max(1, int(np.sqrt(uniq.shape[1])))
        # a lone tree is grown on all samples: bagging one tree only discards data
        bag = self.n_trees > 1 if self.bootstrap is None else self.bootstrap
        self.trees = []
        for _ in range(self.n_trees):
            boot = rng.multinomial(int(n), cell_p).reshape(C.shape).astype(np.float64) if bag else C
            rows = np.flatnonzero(boot.sum(axis=1) > 0)
            builder = _TreeBuilder(uniq, self.min_samples_split, max_features, rng)
            builder.build(rows, boot[rows])
            self.trees.append(builder.arrays())
        return self

    def _votes(self, U):
        votes = np.zeros((U.shape[0], self.n_classes))
        rows = np.arange(U.shape[0])
        for feature, threshold, left, right, label in self.trees:
            node = np.zeros(U.shape[0], dtype=np.int64)
            while True:
                f = feature[node]
                inner = f >= 0
                if not inner.any():
                    break
                idx = np.flatnonzero(inner)
                go_left = U[idx, f[idx]] <= threshold[node[idx]]
                node[idx] = np.where(go_left, left[node[idx]], right[node[idx]])
            votes[rows, label[node]] += 1.0
        return votes / len(self.trees)

    def predict_proba(self, X):
        return _predict_unique(X, self._votes)

    def to_arrays(self) -> dict:
        out = {}
        for t, arrs in enumerate(self.trees):
            out[f"tree{t}"] = np.stack([a.astype(np.float64) for a in arrs])
        return out

    @classmethod
    def from_arrays(cls, params: dict, arrays: dict):
        rf = cls(params["n_trees"], params["min_samples_split"], params["n_classes"])
        for t in range(rf.n_trees):
            a = arrays[f"tree{t}"]
            rf.trees.append((a[0].astype(np.int64), a[1], a[2].astype(np.int64),
                             a[3].astype(np.int64), a[4].astype(np.int64)))
        return rf


def fit_random_forest(frames, labels, n_trees, min_samples_split, rng, n_classes=None) -> RandomForest:
    """Bagged Gini CART trees with sqrt(N_e) candidate features per split."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size < 1:
        raise ValueError("no training frames")
    n_classes = n_classes or int(labels.max()) + 1
    return RandomForest(n_trees, min_samples_split, n_classes).fit(frames, labels, rng)


# -- linear models ------------------------------------------------------------


def _with_bias(U):
    return np.hstack([U, np.ones((U.shape[0], 1))])


@dataclass
class LinearSVM:
    """Crammer-Singer multiclass linear SVM (L2 penalty, bias as an extra feature).

    Minimises ``0.5 ||W||^2 + C sum_i max_r(W_r x_i + [r != y_i]) - W_{y_i} x_i``
    by projected subgradient descent; the returned weights average the
    second half of the iterates.
    """

    C: float = 1.0
    n_classes: int = 2
    n_iter: int = 3000
    W: np.ndarray | None = field(default=None, repr=False)

    kind = "linear_svm"

    def fit(self, X, y, rng=None, sample_counts=None):
        uniq, C, _ = _compress(X, y, self.n_classes)
        if sample_counts is not None:
            C = sample_counts
        Xb = _with_bias(uniq)
        k = self.n_classes
        self.W = np.zeros((Xb.shape[1], k))
        if self.C == 0:
            return self
        n = C.sum()
        lam = 1.0 / (self.C * n)
        radius = 1.0 / np.sqrt(lam)
        # rows of the hinge sum: one per (unique row, true class) with weight
        r_idx, y_idx = np.nonzero(C)
        w = C[r_idx, y_idx] / n
        Xr = Xb[r_idx]
        W = np.zeros_like(self.W)
        avg = np.zeros_like(W)
        n_avg = 0
        delta = np.ones((len(r_idx), k))
        delta[np.arange(len(r_idx)), y_idx] = 0.0
        for t in range(1, self.n_iter + 1):
            scores = Xr @ W + delta
            top = np.argmax(scores, axis=1)
            active = top != y_idx
            G = lam * W
            if active.any():
                coef = np.zeros((len(r_idx), k))
                coef[np.flatnonzero(active), top[active]] += w[active]
                coef[np.flatnonzero(active), y_idx[active]] -= w[active]
                G = G + Xr.T @ coef
            W = W - G / (lam * t)
            norm = np.linalg.norm(W)
            if norm > radius:
                W *= radius / norm
            if t > self.n_iter // 2:
                avg += W
                n_avg += 1
        self.W = avg / n_avg
        return self

    def decision_function(self, X):
        return _linear_scores(X, self.W)

    def hinge_loss(self, X, y) -> float:
        scores = self.decision_function(X)
        y = np.asarray(y)
        delta = np.ones_like(scores)
        delta[np.arange(len(y)), y] = 0.0
        return float(np.sum(np.max(scores + delta, axis=1) - scores[np.arange(len(y)), y]))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def to_arrays(self) -> dict:
        return {"W": self.W}

    @classmethod
    def from_arrays(cls, params: dict, arrays: dict):
        return cls(params["C"], params["n_classes"], W=arrays["W"].copy())


def fit_linear_svm(frames, labels, C, multi_class_strategy="crammer_singer", n_classes=None) -> LinearSVM:
    if multi_class_strategy != "crammer_singer":
        raise ValueError("only the crammer_singer strategy is implemented")
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ValueError("linear SVM needs at least two classes")
    return LinearSVM(C, n_classes or int(labels.max()) + 1).fit(frames, labels)


def _linear_scores(X, W):
    # Feature-by-feature accumulation: each row's score is independent of
    # how many rows are scored together, so streaming matches batch exactly.
    Xb = _with_bias(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    out = np.zeros((Xb.shape[0], W.shape[1]))
    for k in range(W.shape[0]):
        out += Xb[:, k:k + 1] * W[k]
    return out


@dataclass
class RidgeClassifier:
    """Least squares on +/-1 class targets with an unpenalised intercept."""

    alpha: float = 1.0
    n_classes: int = 2
    W: np.ndarray | None = field(default=None, repr=False)

    kind = "ridge"

    def fit(self, X, y, rng=None, sample_counts=None):
        uniq, C, _ = _compress(X, y, self.n_classes)
        if sample_counts is not None:
            C = sample_counts
        w = C.sum(axis=1)
        n = w.sum()
        targets = (2.0 * C - w[:, None]) / np.where(w > 0, w, 1.0)[:, None]
        x_mean = (w @ uniq) / n
        y_mean = (w @ targets) / n
        Xc = uniq - x_mean
        Yc = targets - y_mean
        A = Xc.T @ (Xc * w[:, None]) + self.alpha * np.eye(uniq.shape[1])
        coef = np.linalg.lstsq(A, Xc.T @ (Yc * w[:, None]), rcond=None)[0]
        intercept = y_mean - x_mean @ coef
        self.W = np.vstack([coef, intercept])
        return self

    def decision_function(self, X):
        return _linear_scores(X, self.W)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def to_arrays(self) -> dict:
        return {"W": self.W}

    @classmethod
    def from_arrays(cls, params: dict, arrays: dict):
        return cls(params["alpha"], params["n_classes"], W=arrays["W"].copy())


# -- candidates -------------------------------------------------------------


@dataclass(frozen=True)
class EventClassifier:
    """An unfitted candidate: a classifier family plus its hyperparameters."""

    kind: str
    n_trees: int = 100
    min_samples_split: int = 2
    C: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if self.n_trees < 1 or self.min_samples_split < 2:
            raise ValueError("n_trees must be >= 1 and min_samples_split >= 2")
        if self.C < 0 or self.alpha < 0:
            raise ValueError("C and alpha must be non-negative")

    def params(self) -> dict:
        if self.kind == "random_forest":
            return {"n_trees": self.n_trees, "min_samples_split": self.min_samples_split}
        if self.kind == "linear_svm":
            return {"C": self.C, "penalty": "l2", "multi_class": "crammer_singer"}
        return {"alpha": self.alpha}

    def make(self, n_classes: int):
        if self.kind == "random_forest":
            return RandomForest(self.n_trees, self.min_samples_split, n_classes)
        if self.kind == "linear_svm":
            return LinearSVM(self.C, n_classes)
        return RidgeClassifier(self.alpha, n_classes)

    def label(self) -> str:
        return self.kind + "(" + ", ".join(f"{k}={v}" for k, v in self.params().items()) + ")"


def default_candidates() -> list[EventClassifier]:
    grid = [EventClassifier("random_forest", n_trees=n, min_samples_split=m)
            for n in (100, 400, 500) for m in (2, 3)]
    grid += [EventClassifier("linear_svm", C=c) for c in (0.5, 1.0, 2.0, 4.0)]
    grid += [EventClassifier("ridge", alpha=a) for a in (0.1, 1.0)]
    return grid


# -- ROC AUC ----------------------------------------------------------------


def _midranks(x):
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    bounds = np.flatnonzero(np.concatenate(([True], xs[1:] != xs[:-1], [True])))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + hi - 1) + 1.0
    return ranks


def roc_auc_ovr(scores, labels) -> float:
    """Macro-averaged one-vs-rest ROC AUC via the Mann-Whitney rank statistic.

    Classes with no positive (or no negative) frame are skipped with a
    warning; ties count one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim == 1:
        scores = np.column_stack([-scores, scores])
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("ROC AUC needs at least two classes present")
    aucs = []
    for j in range(scores.shape[1]):
        pos = labels == j
        n_pos = int(pos.sum())
        n_neg = labels.size - n_pos
        if n_pos == 0 or n_neg == 0:
            warnings.warn(f"class {j} absent from labels; skipped in ROC AUC")
            continue
        ranks = _midranks(scores[:, j])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    return float(np.mean(aucs))


# -- ensemble -----------------------------------------------------------------


@dataclass
class EnsembleModel:
    members: list
    n_classes: int
    candidates: list = field(default_factory=list)
    selection_counts: dict = field(default_factory=dict)

    def predict_proba(self, X) -> np.ndarray:
        return np.mean([m.predict_proba(X) for m in self.members], axis=0)

    def predict(self, frame) -> np.ndarray:
        return self.predict_proba(np.atleast_2d(frame))[0]

    forward = predict_proba
    causal = True

    def save(self, path, meta=None):
        arrays, members = {}, []
        for i, (cand, model) in enumerate(zip(self.candidates, self.members)):
            members.append({"kind": cand.kind, **cand.params()})
            for name, a in model.to_arrays().items():
                arrays[f"m{i}.{name}"] = a
        config = {"n_classes": self.n_classes, "members": members}
        return checkpoint.save(path, "events", config, arrays,
                               [c.label() for c in self.candidates], meta)

    @classmethod
    def from_arrays(cls, config: dict, arrays: dict):
        members, cands = [], []
        b = config["n_classes"]
        for i, spec in enumerate(config["members"]):
            sub = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(f"m{i}.")}
            kind = spec["kind"]
            if kind == "random_forest":
                cand = EventClassifier(kind, n_trees=spec["n_trees"], min_samples_split=spec["min_samples_split"])
                model = RandomForest.from_arrays({**spec, "n_classes": b}, sub)
            elif kind == "linear_svm":
                cand = EventClassifier(kind, C=spec["C"])
                model = LinearSVM.from_arrays({**spec, "n_classes": b}, sub)
            else:
                cand = EventClassifier(kind, alpha=spec["alpha"])
                model = RidgeClassifier.from_arrays({**spec, "n_classes": b}, sub)
            members.append(model)
            cands.append(cand)
        return cls(members, b, cands)

    @classmethod
    def load(cls, path):
        header, arrays = checkpoint.load(path)
        if header["kind"] != "events":
            raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not an event ensemble")
        return cls.from_arrays(header["config"], arrays)


def predict(ensemble: EnsembleModel, frame) -> np.ndarray:
    return ensemble.predict(frame)


def select_ensemble(candidates, train_frames, train_labels, val_frames, val_labels,
                    rng: np.random.Generator, n_classes: int | None = None, max_iters: int = 200,
                    early_stop: float = 1e-6, n_members: int = 3) -> EnsembleModel:
    """Bootstrap-and-score selection of the three most frequently best candidates.

    Each iteration fits every candidate on a bootstrap of the training
    frames and records the one with the highest validation AUC (earliest
    candidate on ties). The loop stops once the running-best AUC improves
    by less than ``early_stop``. Members are refitted on train + val frames.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty candidate grid")
    y_tr = np.asarray(train_labels, dtype=np.int64)
    y_va = np.asarray(val_labels, dtype=np.int64)
    b = n_classes or int(max(y_tr.max(), y_va.max())) + 1
    X_tr = np.asarray(train_frames, dtype=np.float64)
    uniq, C, inverse = _compress(X_tr, y_tr, b)
    n = int(C.sum())
    cell_p = (C / n).reshape(-1)
    counts: Counter = Counter()
    first_seen: dict = {}
    best_auc = -np.inf
    for it in range(max_iters):
        boot = rng.multinomial(n, cell_p).reshape(C.shape).astype(np.float64)
        aucs = []
        for cand in candidates:
            model = cand.make(b)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model.fit(uniq, np.zeros(uniq.shape[0], dtype=np.int64), rng, sample_counts=boot)
                aucs.append(roc_auc_ovr(model.predict_proba(val_frames), y_va))
        winner = int(np.argmax(aucs))
        counts[winner] += 1
        first_seen.setdefault(winner, it)
        log.debug("selection iteration %d: %s (AUC %.6f)", it, candidates[winner].label(), aucs[winner])
        improvement = aucs[winner] - best_auc
        best_auc = max(best_auc, aucs[winner])
        if it > 0 and improvement < early_stop:
            break
    ranking = sorted(counts, key=lambda c: (-counts[c], c))
    chosen = [ranking[i % len(ranking)] for i in range(n_members)]
    X_all = np.vstack([X_tr, np.asarray(val_frames, dtype=np.float64)])
    y_all = np.concatenate([y_tr, y_va])
    members = [candidates[c].make(b).fit(X_all, y_all, rng) for c in chosen]
    return EnsembleModel(members, b, [candidates[c] for c in chosen],
                         {candidates[c].label(): counts[c] for c in counts})
