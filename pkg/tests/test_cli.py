import csv
import io
import logging

import numpy as np
import pytest

from statefuse import cli, dataset, fusion
from statefuse.core import ConfigError, DataError
from statefuse.pipeline import Component

COMPONENTS = ("tcn-kin", "lstm-kin", "tcn-vis", "events")


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("generate", "--task", "benchmark", "--trials", 4, "--users", 2, "--seed", 5,
               "--max-frames", 90, "--out", root) == 0
    return root


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    ck = tmp_path_factory.mktemp("ck")
    for m in COMPONENTS:
        assert run("train", "--data", data, "--model", m, "--epochs", 2, "--out", ck) == 0
    assert run("train", "--data", data, "--model", "fusion-kve", "--out", ck) == 0
    return ck


def joint_frames(trial):
    return np.hstack([trial.kinematics.data, trial.vision.data, trial.events.data])


def test_generate_round_robin_users_and_determinism(tmp_path):
    assert run("generate", "--task", "rious", "--trials", 30, "--users", 5, "--max-frames", 20,
               "--out", tmp_path / "a") == 0
    users = [e["user_id"] for e in dataset.read_index(tmp_path / "a")["trials"]]
    assert sorted({users.count(u) for u in users}) == [6]
    assert run("generate", "--task", "rious", "--trials", 30, "--users", 5, "--max-frames", 20,
               "--out", tmp_path / "b") == 0
    for p in sorted((tmp_path / "a").rglob("*.csv")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_generate_rejects_zero_trials_and_unknown_task(tmp_path):
    assert run("generate", "--trials", 0, "--out", tmp_path) == 2
    assert run("generate", "--task", "nope", "--out", tmp_path) == 2


def test_fusion_before_components_fails(data, tmp_path, caplog):
    with caplog.at_level(logging.ERROR, logger="statefuse"):
        assert run("train", "--data", data, "--model", "fusion-kv", "--out", tmp_path) == 2
    assert "train components first" in caplog.text


def test_missing_data_is_a_data_error(tmp_path):
    assert run("train", "--data", tmp_path / "none", "--model", "events", "--out", tmp_path) == 3


def test_training_writes_artifacts(trained):
    assert (trained / "tcn-kin_loss.csv").read_text().splitlines()[0] == "epoch,loss"
    with open(trained / "alpha_fusion-kve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "model" and [r[0] for r in rows[1:]] == list(fusion.FUSION_KVE)
    sums = np.sum([[float(v) for v in r[1:]] for r in rows[1:]], axis=0)
    assert np.allclose(sums, 1, atol=1e-9)


def test_checkpoint_round_trip_is_bit_exact(trained, data, tmp_path):
    trial = dataset.read_dataset(data)[0]
    for m in COMPONENTS:
        comp = Component.load(trained / f"{m}.ckpt")
        comp.save(tmp_path / f"{m}.ckpt")
        again = Component.load(tmp_path / f"{m}.ckpt")
        assert np.array_equal(comp.predict(trial), again.predict(trial))


def test_infer_stream_equals_batch_fusion(trained, data):
    trial = dataset.read_dataset(data)[0]
    frames = joint_frames(trial)
    stdin = io.StringIO("".join(",".join(repr(float(v)) for v in f) + "\n" for f in frames))
    out = io.StringIO()
    cfg = cli.RunConfig("infer-stream", checkpoints=trained, model="fusion-kve")
    assert cli.cmd_infer_stream(cfg, stdin, out) == len(frames)
    comps = [Component.load(trained / f"{m}.ckpt") for m in fusion.FUSION_KVE]
    fm = fusion.FusionModel.load(trained / "fusion-kve.ckpt")
    batch = fm.decide([c.predict(trial) for c in comps])
    assert out.getvalue().split() == [trial.vocab.names[s] for s in batch]


def test_infer_stream_input_errors(trained, data):
    width = joint_frames(dataset.read_dataset(data)[0]).shape[1]
    good = ",".join(["0"] * width) + "\n"
    cfg = cli.RunConfig("infer-stream", checkpoints=trained, model="lstm-kin")
    with pytest.raises(DataError, match="line 2"):
        cli.cmd_infer_stream(cfg, io.StringIO(good + "1,2\n" + good), io.StringIO())
    cfg.lenient = True
    out = io.StringIO()
    assert cli.cmd_infer_stream(cfg, io.StringIO(good + "1,x\n" + good), out) == 2
    assert cli.cmd_infer_stream(cfg, io.StringIO(""), io.StringIO()) == 0


def test_infer_stream_rejects_non_causal(data, tmp_path):
    assert run("train", "--data", data, "--model", "tcn-kin", "--mode", "non-causal", "--epochs", 1,
               "--out", tmp_path) == 0
    with pytest.raises(ConfigError, match="causal"):
        cli.build_stream(tmp_path, "tcn-kin")


def test_eval_non_causal_reports_edit_score(data, tmp_path):
    assert run("eval", "--data", data, "--model", "lstm-kin", "--mode", "non-causal", "--epochs", 1,
               "--out", tmp_path) == 0
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0].split(",")
    assert header[-1] == "edit_score"
    assert list(tmp_path.glob("timeline_*.csv"))


def test_eval_rejects_checkpoint_with_wrong_dims(trained, small_trials, tmp_path):
    other = dataset.write_dataset(small_trials, tmp_path / "other")
    assert run("eval", "--data", other, "--model", "tcn-kin", "--checkpoints", trained,
               "--out", tmp_path / "r") == 3
