import numpy as np
import pytest

from statefuse import nn, tcn
from statefuse.core import ConfigError, NumericError


def small(causal=True, seed=0, **kw):
    cfg = dict(n_features=3, n_states=4, filters=(5, 6), kernel_seconds=0.3, sample_rate_hz=10, causal=causal)
    cfg.update(kw)
    return tcn.TCN(tcn.TcnConfig(**cfg), seed=seed)


def test_kernel_frames():
    assert tcn.kernel_frames(6.1, 30) == 183
    assert tcn.kernel_frames(3.4, 10) == 35
    assert tcn.kernel_frames(0.2, 10) == 3
    assert tcn.kernel_frames(0.01, 10) == 1


def test_reference_configs_build():
    jig = tcn.build(tcn.TcnConfig(n_features=26, n_states=9, filters=(32, 64, 96), kernel_seconds=6.1,
                                  sample_rate_hz=30))
    assert jig.config.n_layers == 3 and jig.config.kernel == 183
    assert jig.params["enc0.W"].shape == (32, 183, 26)
    assert jig.params["head.W"].shape == (32, 9)
    rious = tcn.build(tcn.TcnConfig(n_features=19, n_states=8))
    assert rious.forward(np.zeros((20, 19))).shape == (20, 8)


def test_zero_layers_rejected():
    with pytest.raises(ConfigError):
        tcn.TcnConfig(n_features=3, n_states=2, filters=())
    with pytest.raises(ConfigError):
        tcn.TcnConfig(n_features=3, n_states=2, filters=(4,), n_layers=0)


@pytest.mark.parametrize("causal", [True, False])
@pytest.mark.parametrize("T", [1, 2, 7, 16, 33])
def test_rows_are_distributions(causal, T):
    m = small(causal)
    p = m.forward(np.random.default_rng(T).normal(size=(T, 3)))
    assert p.shape == (T, 4)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-12)


def test_constant_input_gives_constant_interior_rows():
    m = small(causal=False)
    p = m.forward(np.full((64, 3), 0.7))
    interior = p[16:48]
    assert np.allclose(interior, interior[0], atol=1e-12)


def test_causal_prefix_consistency():
    m = small(causal=True)
    x = np.random.default_rng(1).normal(size=(70, 3))
    full = m.forward(x)
    for t in range(1, 71):
        assert np.array_equal(m.forward(x[:t]), full[:t])


def test_non_causal_looks_ahead():
    m = small(causal=False)
    x = np.random.default_rng(2).normal(size=(20, 3))
    y = x.copy()
    y[6] += 5.0
    assert not np.array_equal(m.forward(x)[:6], m.forward(y)[:6])
    c = small(causal=True)
    assert np.array_equal(c.forward(x)[:6], c.forward(y)[:6])


def test_receptive_field_bound():
    m = small(causal=True)
    R = m.receptive_field()
    assert R == 2 * m.config.kernel * (2 ** 2 - 1)
    x = np.random.default_rng(3).normal(size=(60, 3))
    base = m.forward(x)[-1]
    y = x.copy()
    y[: 60 - 1 - R] += 10.0
    assert np.array_equal(m.forward(y)[-1], base)


def test_learning_rate_zero_leaves_parameters():
    m = small()
    before = {k: v.copy() for k, v in m.params.items()}
    data = [(np.random.default_rng(4).normal(size=(12, 3)), np.arange(12) % 4)]
    tcn.train(m, data, tcn.TcnTrainOptions(epochs=3, learning_rate=0.0))
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_training_is_deterministic_and_reduces_loss():
    rng = np.random.default_rng(5)
    data = [(rng.normal(size=(20, 3)), rng.integers(0, 4, 20)) for _ in range(3)]
    runs = []
    for _ in range(2):
        m = small(seed=11)
        _, losses = tcn.train(m, data, tcn.TcnTrainOptions(epochs=5, learning_rate=1e-2, seed=2))
        runs.append((m, losses))
    assert all(np.array_equal(runs[0][0].params[k], runs[1][0].params[k]) for k in runs[0][0].params)
    assert runs[0][1][-1] < runs[0][1][0]


def test_nan_loss_raises_numeric_error():
    m = small()
    m.params["head.W"][:] = np.nan
    with pytest.raises(NumericError):
        tcn.train(m, [(np.ones((8, 3)), np.zeros(8, dtype=int))], tcn.TcnTrainOptions(epochs=1))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = small(causal=False)
    x = np.random.default_rng(6).normal(size=(25, 3))
    m.save(tmp_path / "m.ckpt")
    m2 = tcn.TCN.load(tmp_path / "m.ckpt")
    assert m2.config == m.config
    assert np.array_equal(m2.forward(x), m.forward(x))


def test_stop_gradient_matches_frozen_denominator_differences():
    m = small(causal=True)
    for p in m.params.values():
        p += np.random.default_rng(7).normal(0, 0.05, p.shape)
    x = np.random.default_rng(8).normal(size=(10, 3))
    y = np.arange(10) % 4
    loss, grads = m.loss_and_grads(x, y)
    _, (_, _, denoms) = m.forward(x, return_cache=True)
    worst = nn.check_gradients(lambda: nn.cross_entropy_loss(m.forward(x, denoms=denoms), y), m.params, grads)
    assert max(worst.values()) <= 1e-4
