import math

import numpy as np
import pytest

from statefuse import lstm, nn
from statefuse.core import ConfigError


def small(layers=1, hidden=4, seed=0, **kw):
    return lstm.LSTM(lstm.LstmConfig(n_features=3, n_states=3, n_layers=layers, hidden_units=hidden, **kw), seed)


def scalar_cell(x, h, c, P):
    """Scalar-by-scalar peephole cell used as an oracle."""
    H = h.size
    out_h, out_c = np.zeros(H), np.zeros(H)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    for u in range(H):
        a = [P["b"][gate * H + u] + sum(x[n] * P["Wx"][n, gate * H + u] for n in range(x.size))
             + sum(h[m] * P["Wh"][m, gate * H + u] for m in range(H)) for gate in range(4)]
        i = sig(a[0] + P["p_i"][u] * c[u])
        f = sig(a[1] + P["p_f"][u] * c[u])
        g = math.tanh(a[2])
        out_c[u] = f * c[u] + i * g
        o = sig(a[3] + P["p_o"][u] * out_c[u])
        out_h[u] = o * math.tanh(out_c[u])
    return out_h, out_c


def zero_params(n, H):
    return {"Wx": np.zeros((n, 4 * H)), "Wh": np.zeros((H, 4 * H)), "b": np.zeros(4 * H),
            "p_i": np.zeros(H), "p_f": np.zeros(H), "p_o": np.zeros(H)}


def test_zero_cell():
    h, c = lstm.cell_step(np.ones((1, 3)), np.zeros((1, 2)), np.zeros((1, 2)), zero_params(3, 2))
    assert not h.any() and not c.any()


def test_memory_carry():
    P = zero_params(3, 2)
    P["b"][:2] = -1e4      # input gate shut
    P["b"][2:4] = 1e4      # forget gate open
    c_prev = np.array([[0.3, -1.7]])
    _, c = lstm.cell_step(np.ones((1, 3)), np.zeros((1, 2)), c_prev, P)
    assert np.array_equal(c, c_prev)


def test_cell_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    P = {k: rng.normal(size=v.shape) for k, v in zero_params(3, 4).items()}
    x, h, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
    h1, c1 = lstm.cell_step(x[None], h[None], c[None], P)
    h2, c2 = scalar_cell(x, h, c, P)
    assert np.allclose(h1[0], h2, atol=1e-12) and np.allclose(c1[0], c2, atol=1e-12)


def test_forget_bias_initialised_to_one():
    m = small(hidden=5)
    assert np.array_equal(m.params["l0.b"][5:10], np.ones(5))


def test_param_count_matches_arrays():
    for layers in (1, 2):
        m = small(layers=layers, hidden=6)
        assert m.n_params() == sum(p.size for p in m.params.values())


def test_forward_rows_and_prefix():
    m = small(layers=2)
    x = np.random.default_rng(2).normal(size=(30, 3))
    full = m.forward(x)
    assert np.allclose(full.sum(axis=1), 1, atol=1e-12)
    for t in range(1, 31):
        assert np.array_equal(m.forward(x[:t]), full[:t])


def test_zero_input_untrained_model_is_constant():
    m = small()
    for k in m.params:
        if k.endswith(".b"):
            m.params[k][:] = 0.0
    p = m.forward(np.zeros((10, 3)))
    assert np.allclose(p, p[0])


def test_step_state_equals_forward():
    m = small(layers=2)
    x = np.random.default_rng(3).normal(size=(12, 3))
    state = m.initial_state()
    rows = []
    for t in range(12):
        p, state = m.step(x[t], state)
        rows.append(p)
    assert np.array_equal(np.array(rows), m.forward(x))


def test_config_validation():
    with pytest.raises(ConfigError):
        lstm.LstmConfig(n_features=3, n_states=2, n_layers=0)
    with pytest.raises(ConfigError):
        lstm.LstmConfig(n_features=3, n_states=2, dropout=1.0)


def test_gradient_three_frames_four_units():
    m = small(hidden=4, seed=4)
    x = np.random.default_rng(5).normal(size=(1, 3, 3))
    y = np.array([[0, 2, 1]])
    mask = np.ones((1, 3))
    _, grads, _ = m.window_loss_and_grads(x, y, mask, m.initial_state(1))
    loss_fn = lambda: m.window_loss_and_grads(x, y, mask, m.initial_state(1))[0]
    worst = nn.check_gradients(loss_fn, m.params, grads)
    assert max(worst.values()) <= 1e-4


def test_padding_mask_ignores_padded_frames():
    m = small(seed=6)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 5, 3))
    y = np.array([[0, 1, 2, 0, 1]])
    short, g_short, _ = m.window_loss_and_grads(x[:, :3], y[:, :3], np.ones((1, 3)), m.initial_state(1))
    x_pad = x.copy()
    x_pad[:, 3:] = 99.0
    mask = np.array([[1, 1, 1, 0, 0.0]])
    padded, g_pad, _ = m.window_loss_and_grads(x_pad, y, mask, m.initial_state(1))
    assert padded == pytest.approx(short, rel=1e-12)
    assert all(np.allclose(g_short[k], g_pad[k], atol=1e-12) for k in g_short)


def test_lr_zero_and_determinism():
    rng = np.random.default_rng(8)
    data = [(rng.normal(size=(30, 3)), rng.integers(0, 3, 30)) for _ in range(3)]
    m = small(learning_rate=0.0)
    before = {k: v.copy() for k, v in m.params.items()}
    lstm.train(m, data, lstm.LstmTrainOptions(epochs=2, batch_size=2))
    assert all(np.array_equal(before[k], m.params[k]) for k in before)
    a, b = small(learning_rate=0.5, dropout=0.3), small(learning_rate=0.5, dropout=0.3)
    lstm.train(a, data, lstm.LstmTrainOptions(epochs=3, batch_size=2, seed=1))
    lstm.train(b, data, lstm.LstmTrainOptions(epochs=3, batch_size=2, seed=1))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_checkpoint_round_trip(tmp_path):
    m = small(layers=2, seed=9)
    x = np.random.default_rng(10).normal(size=(15, 3))
    m.save(tmp_path / "l.ckpt")
    assert np.array_equal(lstm.LSTM.load(tmp_path / "l.ckpt").forward(x), m.forward(x))


def test_default_grid_and_documented_optima():
    g = lstm.DEFAULT_GRID
    assert set(g["learning_rate"]) == {0.5, 1.0}
    assert set(g["n_layers"]) == {1, 2}
    assert set(g["hidden_units"]) == {256, 512, 1024, 2048}
    assert set(g["dropout"]) == {0.0, 0.5}
    jigsaws_best = {"n_layers": 1, "hidden_units": 1024, "dropout": 0.5, "learning_rate": 1.0}
    assert all(jigsaws_best[k] in g[k] for k in jigsaws_best)
    assert 512 in g["hidden_units"]


def test_single_cell_grid_returns_that_cell():
    rng = np.random.default_rng(11)
    pairs = [(rng.normal(size=(10, 3)), rng.integers(0, 3, 10)) for _ in range(2)]
    base = lstm.LstmConfig(n_features=3, n_states=3, hidden_units=4)
    best, results = lstm.grid_search({"hidden_units": [3]}, [(pairs[:1], pairs[1:])], base,
                                     lstm.LstmTrainOptions(epochs=1))
    assert best.hidden_units == 3 and len(results) == 1
