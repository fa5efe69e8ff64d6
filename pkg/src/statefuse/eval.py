"""Metrics and the leave-one-user-out experiment harness."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fusion
from .core import TrialBundle, louo_splits, segment_runs
from .pipeline import Component

log = logging.getLogger(__name__)

DEFAULT_FUSIONS = {"fusion-kv": fusion.FUSION_KV, "fusion-kve": fusion.FUSION_KVE}


def _labels(x) -> np.ndarray:
    return np.asarray(getattr(x, "labels", x), dtype=np.int64)


def frame_accuracy(pred, gt) -> float:
    pred, gt = _labels(pred), _labels(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predicted vs {gt.shape[0]} true frames")
    return 100.0 * float(np.mean(pred == gt))


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance (two-row DP)."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_score(pred, gt) -> float:
    """Segment-level edit score: ``100 * (1 - D / max(#segments))``, floored at 0."""
    pred, gt = _labels(pred), _labels(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predicted vs {gt.shape[0]} true frames")
    sp = [s.state for s in segment_runs(pred)]
    sg = [s.state for s in segment_runs(gt)]
    d = levenshtein(sp, sg)
    return max(0.0, 100.0 * (1.0 - d / max(len(sp), len(sg))))


@dataclass
class MetricReport:
    frame_accuracy_pct: float
    per_state_accuracy: list
    confusion: list
    edit_score: float | None = None

    @classmethod
    def from_predictions(cls, preds: Sequence, gts: Sequence, n_states: int, with_edit: bool):
        p = np.concatenate([_labels(x) for x in preds])
        g = np.concatenate([_labels(x) for x in gts])
        conf = np.zeros((n_states, n_states), dtype=np.int64)
        np.add.at(conf, (g, p), 1)
        support = conf.sum(axis=1)
        per_state = [float(100.0 * conf[j, j] / support[j]) if support[j] else None for j in range(n_states)]
        edit = float(np.mean([edit_score(a, b) for a, b in zip(preds, gts)])) if with_edit else None
        return cls(frame_accuracy(p, g), per_state, conf.tolist(), edit)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.edit_score is None:
            d.pop("edit_score")
        return d


@dataclass
class FoldResult:
    test_user: str
    reports: dict
    alpha: dict = field(default_factory=dict)
    test_predictions: dict = field(default_factory=dict)
    test_labels: list = field(default_factory=list)
    test_trials: list = field(default_factory=list)


@dataclass
class LouoReport:
    mode: str
    model_names: list
    state_names: list
    folds: list
    aggregate: dict

    def accuracy_table(self) -> dict:
        return {name: rep.frame_accuracy_pct for name, rep in self.aggregate.items()}

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "models": self.model_names,
            "states": self.state_names,
            "aggregate": {k: v.to_dict() for k, v in self.aggregate.items()},
            "folds": [{"test_user": f.test_user, "reports": {k: v.to_dict() for k, v in f.reports.items()},
                       "alpha": {k: np.asarray(a).tolist() for k, a in f.alpha.items()}}
                      for f in self.folds],
        }

    def write(self, out_dir) -> dict:
        """Write report.json, metrics.csv and per-fusion alpha CSVs; returns the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "metrics": out / "metrics.csv"}
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2))
        with_edit = self.mode == "non-causal"
        with open(paths["metrics"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "test_user", "model", "frame_accuracy"] + (["edit_score"] if with_edit else []))
            rows = [(str(k), f.test_user, f.reports) for k, f in enumerate(self.folds)]
            rows.append(("aggregate", "", self.aggregate))
            for fold, user, reports in rows:
                for name, rep in reports.items():
                    row = [fold, user, name, repr(rep.frame_accuracy_pct)]
                    if with_edit:
                        row.append(repr(rep.edit_score))
                    w.writerow(row)
        for fname in self.folds[0].alpha if self.folds else []:
            mean_alpha = np.mean([f.alpha[fname] for f in self.folds], axis=0)
            paths[f"alpha-{fname}"] = fusion.write_alpha_csv(
                out / f"alpha_{fname}.csv", mean_alpha, DEFAULT_FUSIONS.get(fname, ()) or
                [f"m{i}" for i in range(mean_alpha.shape[0])], self.state_names)
        return paths


def timeline_export(preds: dict, gt, path=None, sample_rate_hz: float = 10.0, state_names=None):
    """Per-frame table: time, ground truth, one prediction and one error flag per model.

    Writes a CSV when ``path`` is given; always returns the rows.
    """
    gt = _labels(gt)
    names = list(preds)
    cols = {n: _labels(preds[n]) for n in names}
    for n, c in cols.items():
        if c.shape != gt.shape:
            raise ValueError(f"{n}: {c.shape[0]} frames vs {gt.shape[0]} ground-truth frames")
    fmt = (lambda s: state_names[s]) if state_names else int
    header = ["time_s", "gt"] + names + [f"{n}_error" for n in names]
    rows = [header]
    for t in range(gt.shape[0]):
        row = [repr(t / sample_rate_hz), fmt(gt[t])]
        row += [fmt(cols[n][t]) for n in names]
        row += [int(cols[n][t] != gt[t]) for n in names]
        rows.append(row)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    return rows


def _run_fold(args):
    k, train, test, specs, fusions, mode, n_states, seed = args
    with_edit = mode == "non-causal"
    comps = {}
    train_preds, test_preds = {}, {}
    for name, spec in specs.items():
        comp = Component(spec.for_mode(mode))
        comp.fit(train, n_states, seed=seed + 7919 * k)
        comps[name] = comp
        train_preds[name] = [comp.predict(t) for t in train]
        test_preds[name] = [comp.predict(t) for t in test]
        log.info("fold %d: trained %s", k, name)
    gts_train = [t.labels.labels for t in train]
    gts_test = [t.labels.labels for t in test]
    reports, alphas, decisions = {}, {}, {}
    for name in specs:
        decisions[name] = [p.argmax(axis=1) for p in test_preds[name]]
    for fname, members in fusions.items():
        if not all(m in comps for m in members):
            continue
        fm = fusion.fit_fusion(members, train_preds, gts_train, n_states)
        alphas[fname] = fm.alpha
        decisions[fname] = [fm.decide([test_preds[m][i] for m in members]) for i in range(len(test))]
    for name, dec in decisions.items():
        reports[name] = MetricReport.from_predictions(dec, gts_test, n_states, with_edit)
    return FoldResult(test[0].user_id, reports, alphas, decisions, gts_test, [t.trial_id for t in test])


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("STATEFUSE_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def run_louo(trials: Sequence[TrialBundle], specs: dict, mode: str = "causal", fusions: dict | None = None,
             seed: int = 0, n_states: int | None = None, state_names=None, workers: int | None = None) -> LouoReport:
    """Leave-one-user-out evaluation of every component and fusion.

    Each fold trains all components on the other users' trials, fits the
    fusion weights on those training predictions, and scores everything on
    the held-out user. The aggregate is the unweighted mean over folds.
    """
    if mode not in ("causal", "non-causal"):
        raise ValueError(f"mode must be 'causal' or 'non-causal', got {mode!r}")
    folds = louo_splits(list(trials))
    vocab = trials[0].vocab
    n_states = n_states or (vocab.size if vocab else int(max(t.labels.labels.max() for t in trials)) + 1)
    state_names = list(state_names or (vocab.names if vocab else [str(i) for i in range(n_states)]))
    fusions = DEFAULT_FUSIONS if fusions is None else fusions
    if len(specs) < 2:
        fusions = {}
    jobs = [(k, tr, te, specs, fusions, mode, n_states, seed) for k, (tr, te) in enumerate(folds)]
    n_workers = workers or worker_count(len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    names = list(results[0].reports)
    aggregate = {}
    for name in names:
        reps = [r.reports[name] for r in results]
        per_state = []
        for j in range(n_states):
            vals = [r.per_state_accuracy[j] for r in reps if r.per_state_accuracy[j] is not None]
            per_state.append(float(np.mean(vals)) if vals else None)
        conf = np.sum([np.asarray(r.confusion) for r in reps], axis=0).tolist()
        edit = float(np.mean([r.edit_score for r in reps])) if mode == "non-causal" else None
        aggregate[name] = MetricReport(float(np.mean([r.frame_accuracy_pct for r in reps])), per_state, conf, edit)
    return LouoReport(mode, names, state_names, results, aggregate)
