import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from statefuse import fusion
from statefuse.fusion import ConfusionCounts


def counts_1state(*rows):
    tp, tn, fp, fn = (np.array([[r[i]] for r in rows]) for i in range(4))
    return ConfusionCounts(tp, tn, fp, fn)


def onehot(labels, b):
    return np.eye(b)[labels]


def test_confusion_perfect_and_constant():
    gt = np.array([0, 1] * 5)
    c = fusion.confusion_counts([onehot(gt, 2)], gt)
    assert not c.fp.any() and not c.fn.any()
    const = fusion.confusion_counts([onehot(np.zeros(10, int), 2)], gt)
    assert (const.tp[0, 0], const.fp[0, 0], const.tn[0, 0], const.fn[0, 0]) == (5, 5, 0, 0)


def test_confusion_matches_frame_loop():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, 50)
    preds = [rng.random((50, 4)) for _ in range(3)]
    c = fusion.confusion_counts(preds, gt, 4)
    for i, p in enumerate(preds):
        d = p.argmax(1)
        for j in range(4):
            assert c.tp[i, j] == sum(d[t] == j and gt[t] == j for t in range(50))
            assert c.fp[i, j] == sum(d[t] == j and gt[t] != j for t in range(50))
            assert c.fn[i, j] == sum(d[t] != j and gt[t] == j for t in range(50))
            assert c.tn[i, j] == sum(d[t] != j and gt[t] != j for t in range(50))


def test_weight_hand_case():
    alpha = fusion.odds_ratio_weights(counts_1state((8, 90, 1, 1), (4, 88, 3, 5)))
    raw = np.array([720 / (1 + 1e-5), 352 / (15 + 1e-5)])
    assert raw[1] == pytest.approx(23.47, abs=5e-3)
    assert alpha[:, 0] == pytest.approx(raw / raw.sum(), abs=1e-15)
    assert np.round(alpha[:, 0], 4).tolist() == [0.9684, 0.0316]


def test_perfect_model_dominates():
    alpha = fusion.odds_ratio_weights(counts_1state((10, 90, 0, 0), (8, 85, 5, 2)))
    assert 10 * 90 / 1e-5 == pytest.approx(9e7)
    assert alpha[0, 0] > 1 - 1e-6


def test_identical_counts_give_uniform_column():
    alpha = fusion.odds_ratio_weights(counts_1state(*[(5, 40, 2, 3)] * 4))
    assert np.allclose(alpha, 0.25)


def test_all_zero_column_falls_back_to_uniform():
    with pytest.warns(UserWarning, match="uniform"):
        alpha = fusion.odds_ratio_weights(counts_1state((0, 9, 1, 1), (0, 8, 2, 2)))
    assert np.allclose(alpha, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 8))
def test_weight_columns_are_stochastic(seed, a, b):
    rng = np.random.default_rng(seed)
    c = ConfusionCounts(*(rng.integers(0, 200, size=(a, b)) for _ in range(4)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        alpha = fusion.odds_ratio_weights(c)
    assert np.all(alpha >= 0)
    assert np.all(np.abs(alpha.sum(axis=0) - 1) <= 1e-9)


def test_fuse_fixed_point_and_degenerate_weights():
    rng = np.random.default_rng(1)
    Y = rng.dirichlet(np.ones(3), size=7)
    assert np.allclose(fusion.fuse([Y, Y], np.full((2, 3), 0.5)), Y)
    Y1 = onehot(np.full(7, 2), 3)
    alpha = np.full((2, 3), 0.5)
    alpha[:, 2] = [1.0, 0.0]
    assert np.all(fusion.fuse([Y1, Y], alpha)[:, 2] == 1.0)


def test_fuse_hand_case():
    alpha = np.array([[0.9684, 0.3], [0.0316, 0.7]])
    P = fusion.fuse([np.array([[0.6, 0.4]]), np.array([[0.2, 0.8]])], alpha)
    assert P[0] == pytest.approx([0.5874, 0.680], abs=5e-5)
    assert fusion.decide(P).tolist() == [1]


def test_decide_rules():
    assert fusion.decide([0.2, 0.7, 0.1]).tolist() == [1]
    assert fusion.decide([0.5, 0.5]).tolist() == [0]


def test_fuse_shape_checks():
    with pytest.raises(ValueError):
        fusion.fuse([np.ones((3, 2))], np.ones((1, 2)))
    with pytest.raises(ValueError):
        fusion.fuse([np.ones((3, 2))] * 2, np.ones((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fusion_is_monotone_in_each_model_score(seed):
    rng = np.random.default_rng(seed)
    a, b, T = 3, 4, 5
    alpha = rng.dirichlet(np.ones(a), size=b).T
    Y = [rng.random((T, b)) for _ in range(a)]
    base = fusion.fuse(Y, alpha)
    i, j = rng.integers(a), rng.integers(b)
    Y[i] = Y[i].copy()
    Y[i][:, j] += rng.random()
    bumped = fusion.fuse(Y, alpha)
    assert np.all(bumped[:, j] >= base[:, j])
    assert np.array_equal(np.delete(bumped, j, axis=1), np.delete(base, j, axis=1))


def test_dominant_model_reproduces_its_decisions():
    rng = np.random.default_rng(2)
    for _ in range(50):
        T, b = 40, 5
        Y1 = rng.dirichlet(np.ones(b), size=T)
        Y2 = rng.dirichlet(np.ones(b), size=T)
        alpha = np.vstack([np.ones(b), np.zeros(b)])
        assert np.array_equal(fusion.decide(fusion.fuse([Y1, Y2], alpha)), Y1.argmax(1))


def test_fit_fusion_and_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    gts = [rng.integers(0, 3, 30) for _ in range(2)]
    preds = {"good": [onehot(g, 3) * 0.8 + 0.1 for g in gts],
             "noise": [rng.dirichlet(np.ones(3), size=30) for _ in gts]}
    fm = fusion.fit_fusion(["good", "noise"], preds, gts, 3, ["a", "b", "c"])
    assert np.all(fm.alpha[0] > 0.99)
    fm.save(tmp_path / "f.ckpt")
    back = fusion.FusionModel.load(tmp_path / "f.ckpt")
    assert np.array_equal(back.alpha, fm.alpha) and back.model_names == ("good", "noise")
    path = fusion.write_alpha_csv(tmp_path / "a.csv", fm.alpha, fm.model_names, ["a", "b", "c"])
    rows = [line.split(",") for line in path.read_text().split()]
    assert rows[0] == ["model", "a", "b", "c"]
    sums = np.sum([[float(v) for v in r[1:]] for r in rows[1:]], axis=0)
    assert np.allclose(sums, 1, atol=1e-12)
