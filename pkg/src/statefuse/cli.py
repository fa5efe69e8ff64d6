"""``statefuse`` command line: generate, train, eval, infer-stream."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset, eval as evaluation, fusion, simgen, stream
from .checkpoint import read_header
from .core import ConfigError, DataError, NumericError, StatefuseError, StateVocab
from .pipeline import COMPONENT_KINDS, Component, default_specs

log = logging.getLogger("statefuse")

FUSIONS = {"fusion-kv": fusion.FUSION_KV, "fusion-kve": fusion.FUSION_KVE}
MODEL_CHOICES = [*COMPONENT_KINDS, *FUSIONS]
EXIT_CODES = {ConfigError: 2, DataError: 3, NumericError: 4}


@dataclass
class RunConfig:
    command: str
    task: str = "rious"
    trials: int = 20
    users: int = 4
    seed: int = 0
    data: Path | None = None
    checkpoints: Path | None = None
    model: str = "fusion-kve"
    mode: str = "causal"
    out: Path | None = None
    lenient: bool = False
    epochs: int | None = None

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        fields = {k: v for k, v in vars(ns).items() if k in cls.__dataclass_fields__}
        for key in ("data", "checkpoints", "out"):
            if fields.get(key) is not None:
                fields[key] = Path(fields[key])
        return cls(**fields)


def ckpt_path(directory: Path, name: str) -> Path:
    return Path(directory) / f"{name}.ckpt"


def _specs(cfg: RunConfig, names):
    specs = default_specs(cfg.mode)
    out = {}
    for n in names:
        spec = specs[n].for_mode(cfg.mode)
        if cfg.epochs is not None and spec.kind in ("tcn", "lstm"):
            spec.train["epochs"] = cfg.epochs
        out[n] = spec
    return out


def _dims(trial) -> dict:
    return {m: trial.stream(m).n_features for m in ("kin", "vis", "evt")}


def _load_data(cfg: RunConfig):
    if cfg.data is None:
        raise ConfigError("--data is required")
    trials = dataset.read_dataset(cfg.data)
    if not trials:
        raise DataError(f"{cfg.data}: dataset lists no trials")
    return trials


# -- generate -----------------------------------------------------------------

def cmd_generate(cfg: RunConfig, noise: str = "benchmark", max_frames: int = 2000) -> Path:
    if cfg.out is None:
        raise ConfigError("--out is required")
    try:
        spec = simgen.load_task(cfg.task)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load task {cfg.task!r}: {e}") from e
    trials = simgen.generate_trials(spec, cfg.trials, cfg.users, cfg.seed, simgen.NOISE_PRESETS[noise],
                                    max_frames=max_frames)
    root = dataset.write_dataset(trials, cfg.out, task=spec.name, seed=cfg.seed,
                                 event_channels=spec.event_channels or None)
    log.info("wrote %d trials for %d users to %s", len(trials), cfg.users, root)
    return root


# -- train --------------------------------------------------------------------

def _write_loss_csv(path: Path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


def _meta(cfg: RunConfig, trials) -> dict:
    return {"mode": cfg.mode, "seed": cfg.seed, "dims": _dims(trials[0]),
            "states": list(trials[0].vocab.names), "sample_rate_hz": trials[0].sample_rate_hz}


def load_component(directory: Path, name: str) -> Component:
    path = ckpt_path(directory, name)
    if not path.is_file():
        raise ConfigError(f"no checkpoint for {name} in {directory}: train components first")
    return Component.load(path)


def cmd_train(cfg: RunConfig) -> list[Path]:
    if cfg.out is None:
        raise ConfigError("--out is required")
    trials = _load_data(cfg)
    n_states = trials[0].vocab.size
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    gts = [t.labels.labels for t in trials]
    if cfg.model in FUSIONS:
        members = FUSIONS[cfg.model]
        missing = [m for m in members if not ckpt_path(out, m).is_file()]
        if missing:
            raise ConfigError(f"{cfg.model} needs checkpoints for {', '.join(missing)} in {out}: "
                              "train components first")
        comps = [load_component(out, m) for m in members]
        for c in comps:
            _check_compatible(c, trials[0], cfg.mode)
        preds = {c.name: [c.predict(t) for t in trials] for c in comps}
        fm = fusion.fit_fusion(members, preds, gts, n_states, trials[0].vocab.names)
        path = fm.save(ckpt_path(out, cfg.model), _meta(cfg, trials))
        fusion.write_alpha_csv(out / f"alpha_{cfg.model}.csv", fm.alpha, members, trials[0].vocab.names)
        acc = evaluation.frame_accuracy(np.concatenate([fm.decide([preds[m][k] for m in members])
                                                        for k in range(len(trials))]), np.concatenate(gts))
        log.info("%s: train frame accuracy %.2f%%", cfg.model, acc)
        return [path]
    comp = Component(_specs(cfg, [cfg.model])[cfg.model])
    losses = comp.fit(trials, n_states, seed=cfg.seed)
    if losses:
        _write_loss_csv(out / f"{cfg.model}_loss.csv", losses)
    acc = evaluation.frame_accuracy(np.concatenate([comp.predict(t).argmax(axis=1) for t in trials]),
                                    np.concatenate(gts))
    log.info("%s: train frame accuracy %.2f%%", cfg.model, acc)
    return [comp.save(ckpt_path(out, cfg.model), _meta(cfg, trials))]


# -- eval ---------------------------------------------------------------------

def _check_compatible(comp: Component, trial, mode: str | None = None):
    want = trial.stream(comp.spec.modality).n_features
    have = comp.input_dim()
    if have is not None and have != want:
        raise DataError(f"{comp.name} checkpoint expects {have} {comp.spec.modality} features, "
                        f"dataset has {want}")
    if mode is not None and comp.spec.kind == "tcn" and comp.causal != (mode == "causal"):
        raise ConfigError(f"{comp.name} checkpoint was trained {'causal' if comp.causal else 'non-causal'}, "
                          f"requested mode is {mode}")


def cmd_eval(cfg: RunConfig) -> dict:
    if cfg.out is None:
        raise ConfigError("--out is required")
    trials = _load_data(cfg)
    names = list(FUSIONS[cfg.model]) if cfg.model in FUSIONS else [cfg.model]
    specs = _specs(cfg, names)
    if cfg.checkpoints is not None:
        # reuse the architectures recorded in trained checkpoints
        for n in names:
            comp = load_component(cfg.checkpoints, n)
            _check_compatible(comp, trials[0])
            specs[n] = comp.spec.for_mode(cfg.mode)
    fusions = {cfg.model: FUSIONS[cfg.model]} if cfg.model in FUSIONS else {}
    if cfg.model == "fusion-kve":
        fusions = dict(FUSIONS)
    report = evaluation.run_louo(trials, specs, cfg.mode, fusions, seed=cfg.seed)
    paths = report.write(cfg.out)
    fold = report.folds[0]
    first = trials[[t.trial_id for t in trials].index(fold.test_trials[0])]
    paths["timeline"] = Path(cfg.out) / f"timeline_{first.trial_id}.csv"
    evaluation.timeline_export({n: d[0] for n, d in fold.test_predictions.items()}, fold.test_labels[0],
                               paths["timeline"], first.sample_rate_hz, report.state_names)
    for name, acc in report.accuracy_table().items():
        log.info("%-12s LOUO frame accuracy %.2f%%", name, acc)
    return paths


# -- infer-stream -------------------------------------------------------------

def build_stream(directory: Path, model: str):
    """Load checkpoints and assemble a streaming runner plus state names."""
    names = list(FUSIONS[model]) if model in FUSIONS else [model]
    comps = [load_component(directory, n) for n in names]
    fusion_model = None
    if model in FUSIONS:
        path = ckpt_path(directory, model)
        if not path.is_file():
            raise ConfigError(f"no {model} checkpoint in {directory}: train it first")
        fusion_model = fusion.FusionModel.load(path)
    else:
        path = ckpt_path(directory, model)
    meta = read_header(path).get("meta") or {}
    if meta.get("mode") == "non-causal" or any(not c.causal for c in comps):
        raise ConfigError("infer-stream needs causal checkpoints; retrain with --mode causal")
    dims = meta["dims"]
    offsets = {"kin": 0, "vis": dims["kin"], "evt": dims["kin"] + dims["vis"]}
    slices = [slice(offsets[c.spec.modality], offsets[c.spec.modality] + dims[c.spec.modality]) for c in comps]
    runner = stream.FusedStream([stream.runner_for(c.model) for c in comps], slices, fusion_model)
    return runner, StateVocab(tuple(meta["states"])), sum(dims.values())


def cmd_infer_stream(cfg: RunConfig, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    if cfg.checkpoints is None:
        raise ConfigError("--checkpoints is required")
    runner, vocab, width = build_stream(cfg.checkpoints, cfg.model)
    n_out = 0
    for lineno, line in enumerate(stdin, 1):
        text = line.strip()
        try:
            vals = np.array([float(v) for v in text.split(",")]) if text else np.empty(0)
            if vals.shape[0] != width:
                raise ValueError(f"expected {width} comma-separated values, got {vals.shape[0]}")
            if not np.all(np.isfinite(vals)):
                raise ValueError("non-finite value")
        except ValueError as e:
            msg = f"line {lineno}: {e}"
            if not cfg.lenient:
                raise DataError(msg) from None
            log.warning("%s (skipped)", msg)
            continue
        stdout.write(vocab.names[runner.decide(vals)] + "\n")
        stdout.flush()
        n_out += 1
    return n_out


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statefuse", description="Surgical state estimation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--mode", choices=["causal", "non-causal"], default="causal")
        if model:
            p.add_argument("--model", choices=MODEL_CHOICES, default="fusion-kve")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--task", default="rious", help="rious, suturing, or a task JSON file")
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--users", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", choices=sorted(simgen.NOISE_PRESETS), default="benchmark")
    g.add_argument("--max-frames", type=int, default=2000)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one component or fit a fusion on trained components")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", help="leave-one-user-out evaluation")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoints", help="take component architectures from these checkpoints")
    e.add_argument("--out", required=True)
    e.add_argument("--epochs", type=int)

    s = sub.add_parser("infer-stream", help="label frames read from stdin, one decision per line")
    s.add_argument("--checkpoints", required=True)
    s.add_argument("--model", choices=MODEL_CHOICES, default="fusion-kve")
    s.add_argument("--lenient", action="store_true", help="skip malformed lines instead of stopping")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    cfg = RunConfig.from_args(args)
    try:
        if args.command == "generate":
            cmd_generate(cfg, args.noise, args.max_frames)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        else:
            cmd_infer_stream(cfg)
    except StatefuseError as e:
        log.error("%s", e)
        return next((code for cls, code in EXIT_CODES.items() if isinstance(e, cls)), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
