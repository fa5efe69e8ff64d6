import numpy as np
import pytest

from statefuse import dataset, simgen
from statefuse.core import DataError


def same_trial(a, b):
    return (np.array_equal(a.kinematics.data, b.kinematics.data)
            and np.array_equal(a.vision.data, b.vision.data)
            and np.array_equal(a.events.data, b.events.data)
            and np.array_equal(a.labels.labels, b.labels.labels)
            and a.vocab == b.vocab and a.user_id == b.user_id and a.trial_id == b.trial_id)


@pytest.fixture
def written(small_trials, tmp_path):
    root = dataset.write_dataset(small_trials, tmp_path / "ds", task="benchmark", seed=3)
    return small_trials, root


def test_round_trip_is_bit_exact(written):
    trials, root = written
    back = dataset.read_dataset(root)
    assert len(back) == len(trials)
    assert all(same_trial(a, b) for a, b in zip(trials, back))


def test_index_records_users_and_task(written):
    trials, root = written
    index = dataset.read_index(root)
    assert index["task"] == "benchmark"
    assert [e["user_id"] for e in index["trials"]] == [t.user_id for t in trials]


def test_event_channel_names_persist(small_trials, tmp_path):
    names = [f"ch{i}" for i in range(6)]
    root = dataset.write_dataset(small_trials[:1], tmp_path, event_channels=names)
    assert dataset.event_channel_names(root) == names


def test_missing_labels_file_is_named(written):
    trials, root = written
    (root / trials[0].trial_id / "labels.csv").unlink()
    with pytest.raises(DataError, match="labels.csv"):
        dataset.read_dataset(root)


def test_bad_row_reports_line(written):
    trials, root = written
    path = root / trials[0].trial_id / "kinematics.csv"
    lines = path.read_text().splitlines()
    lines[3] = lines[3] + ",1.0"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"kinematics\.csv:4"):
        dataset.read_trial(root / trials[0].trial_id)


def test_non_binary_event_rejected(written):
    trials, root = written
    path = root / trials[0].trial_id / "events.csv"
    lines = path.read_text().splitlines()
    cells = lines[1].split(",")
    cells[1] = "2"
    lines[1] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="0 or 1"):
        dataset.read_trial(root / trials[0].trial_id)


def test_truncated_labels_rejected(written):
    trials, root = written
    tdir = root / trials[0].trial_id
    lines = (tdir / "labels.csv").read_text().splitlines()
    (tdir / "labels.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DataError, match="manifest says"):
        dataset.read_trial(tdir)


def test_unknown_state_rejected(written):
    trials, root = written
    tdir = root / trials[0].trial_id
    lines = (tdir / "labels.csv").read_text().splitlines()
    lines[1] = lines[1].split(",")[0] + ",S99"
    (tdir / "labels.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"labels\.csv:2: unknown state"):
        dataset.read_trial(tdir)


def test_rewrite_is_byte_identical(tmp_path):
    spec = simgen.load_task("rious")
    files = []
    for name in ("a", "b"):
        trials = simgen.generate_trials(spec, 2, 2, 9, simgen.NOISE_PRESETS["benchmark"], max_frames=60)
        root = dataset.write_dataset(trials, tmp_path / name, task="rious", seed=9)
        files.append({p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.csv"))})
    assert files[0] == files[1] and files[0]
