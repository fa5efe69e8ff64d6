"""Forward LSTM with forget gates and peephole connections.

Cell equations (gate pre-activations packed in the order i, f, g, o)::

    i = sigmoid(Wx_i x + Wh_i h' + p_i * c' + b_i)
    f = sigmoid(Wx_f x + Wh_f h' + p_f * c' + b_f)
    g = tanh(Wx_g x + Wh_g h' + b_g)
    c = f * c' + i * g
    o = sigmoid(Wx_o x + Wh_o h' + p_o * c + b_o)
    h = o * tanh(c)

Training uses truncated backprop-through-time over padded trial batches
with plain SGD, global-norm clipping and a per-epoch learning-rate decay.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, nn
from .core import ConfigError, NumericError

log = logging.getLogger(__name__)

DEFAULT_GRID = {
    "learning_rate": (0.5, 1.0),
    "n_layers": (1, 2),
    "hidden_units": (256, 512, 1024, 2048),
    "dropout": (0.0, 0.5),
}


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass(frozen=True)
class LstmConfig:
    n_features: int
    n_states: int
    n_layers: int = 1
    hidden_units: int = 512
    dropout: float = 0.0
    learning_rate: float = 1.0
    tbptt_window: int = 64
    clip_norm: float = 5.0
    decay_after: int = 10
    decay: float = 0.9

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden_units < 1:
            raise ConfigError("n_layers and hidden_units must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.tbptt_window < 1:
            raise ConfigError("tbptt_window must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def n_params(self) -> int:
        H, n = self.hidden_units, self.n_features
        per_layer = [4 * H * (n_in + H + 1) + 3 * H for n_in in [n] + [H] * (self.n_layers - 1)]
        return sum(per_layer) + H * self.n_states + self.n_states


@dataclass
class LstmTrainOptions:
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    checkpoint_dir: str | None = None
    on_epoch: object = field(default=None, repr=False)


def cell_step(x_t, h_prev, c_prev, params: dict, return_cache: bool = False):
    """One peephole-LSTM step for a batch of rows (``x_t`` is ``B x N``)."""
    H = h_prev.shape[-1]
    a = x_t @ params["Wx"] + h_prev @ params["Wh"] + params["b"]
    i = sigmoid(a[..., :H] + params["p_i"] * c_prev)
    f = sigmoid(a[..., H:2 * H] + params["p_f"] * c_prev)
    g = np.tanh(a[..., 2 * H:3 * H])
    c = f * c_prev + i * g
    o = sigmoid(a[..., 3 * H:] + params["p_o"] * c)
    tc = np.tanh(c)
    h = o * tc
    if return_cache:
        return h, c, (x_t, h_prev, c_prev, i, f, g, o, c, tc)
    return h, c


def cell_step_backward(dh, dc_next, cache, params, grads):
    """Backprop one step; accumulates into ``grads`` and returns (dx, dh_prev, dc_prev)."""
    x_t, h_prev, c_prev, i, f, g, o, c, tc = cache
    do = dh * tc
    dao = do * o * (1 - o)
    dc = dc_next + dh * o * (1 - tc * tc) + dao * params["p_o"]
    dai = dc * g * i * (1 - i)
    daf = dc * c_prev * f * (1 - f)
    dag = dc * i * (1 - g * g)
    dc_prev = dc * f + dai * params["p_i"] + daf * params["p_f"]
    grads["p_o"] += np.sum(dao * c, axis=0)
    grads["p_i"] += np.sum(dai * c_prev, axis=0)
    grads["p_f"] += np.sum(daf * c_prev, axis=0)
    da = np.concatenate([dai, daf, dag, dao], axis=-1)
    grads["Wx"] += x_t.T @ da
    grads["Wh"] += h_prev.T @ da
    grads["b"] += da.sum(axis=0)
    return da @ params["Wx"].T, da @ params["Wh"].T, dc_prev


class LSTM:
    def __init__(self, config: LstmConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        H = config.hidden_units
        self.params: dict[str, np.ndarray] = {}
        n_in = config.n_features
        for l in range(config.n_layers):
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            self.params.update({
                f"l{l}.Wx": nn.glorot(rng, (n_in, 4 * H), n_in, H),
                f"l{l}.Wh": nn.glorot(rng, (H, 4 * H), H, H),
                f"l{l}.b": b,
                f"l{l}.p_i": rng.uniform(-0.1, 0.1, H),
                f"l{l}.p_f": rng.uniform(-0.1, 0.1, H),
                f"l{l}.p_o": rng.uniform(-0.1, 0.1, H),
            })
            n_in = H
        self.params["head.W"] = nn.glorot(rng, (H, config.n_states), H, config.n_states)
        self.params["head.b"] = np.zeros(config.n_states)

    causal = True

    @property
    def layers(self) -> list[str]:
        return [f"l{l}:peephole-lstm" for l in range(self.config.n_layers)] + ["head:dense-softmax"]

    def layer_params(self, l: int) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.params.items() if k.startswith(f"l{l}.")}

    def n_params(self) -> int:
        return self.config.n_params()

    def initial_state(self, batch: int = 1):
        H = self.config.hidden_units
        return [(np.zeros((batch, H)), np.zeros((batch, H))) for _ in range(self.config.n_layers)]

    def step(self, x_t, state):
        """Advance one frame for a single stream; returns (probs, new_state).

        Batch inference is a loop over this function, so streaming and batch
        outputs agree bit for bit.
        """
        inp = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
        new_state = []
        for l, (h, c) in enumerate(state):
            h, c = cell_step(inp, h, c, self.layer_params(l))
            new_state.append((h, c))
            inp = h
        probs = nn.softmax(inp @ self.params["head.W"] + self.params["head.b"])
        return probs[0], new_state

    def forward(self, x) -> np.ndarray:
        x = np.asarray(getattr(x, "data", x), dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.n_features:
            raise ValueError(f"expected T x {self.config.n_features} features, got {x.shape}")
        state = self.initial_state()
        out = np.empty((x.shape[0], self.config.n_states))
        for t in range(x.shape[0]):
            out[t], state = self.step(x[t], state)
        return out

    __call__ = forward

    # -- training path -----------------------------------------------------

    def window_loss_and_grads(self, x, y, mask, state, rng=None):
        """Loss and gradients over one TBPTT window of a padded batch.

        ``x`` is ``B x W x N``, ``y`` and ``mask`` are ``B x W``. ``state`` is
        the carried (h, c) per layer; gradients do not flow into it. ``rng``
        enables dropout on every layer output.
        """
        cfg = self.config
        B, W, _ = x.shape
        H = cfg.hidden_units
        n_valid = max(int(mask.sum()), 1)
        keep = 1.0 - cfg.dropout
        inp = x
        layer_caches, new_state, drop_masks = [], [], []
        for l in range(cfg.n_layers):
            p = self.layer_params(l)
            h, c = state[l]
            outs = np.empty((B, W, H))
            caches = []
            for t in range(W):
                h_new, c_new, cache = cell_step(inp[:, t], h, c, p, return_cache=True)
                m = mask[:, t:t + 1]
                # padded frames keep the previous state
                h = np.where(m > 0, h_new, h)
                c = np.where(m > 0, c_new, c)
                caches.append(cache)
                outs[:, t] = h
            new_state.append((h, c))
            dm = None
            if rng is not None and cfg.dropout > 0:
                dm = (rng.random((B, W, H)) < keep) / keep
                outs = outs * dm
            drop_masks.append(dm)
            layer_caches.append((caches, inp))
            inp = outs
        flat = inp.reshape(B * W, H)
        probs = nn.softmax(flat @ self.params["head.W"] + self.params["head.b"])
        yf = y.reshape(-1)
        mf = mask.reshape(-1)
        picked = probs[np.arange(B * W), yf]
        loss = float(np.sum(-np.log(np.maximum(picked, nn.LOG_FLOOR)) * mf) / n_valid)

        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dlogits = probs.copy()
        dlogits[np.arange(B * W), yf] -= 1.0
        dlogits *= (mf / n_valid)[:, None]
        grads["head.W"] = flat.T @ dlogits
        grads["head.b"] = dlogits.sum(axis=0)
        dinp = (dlogits @ self.params["head.W"].T).reshape(B, W, H)
        for l in reversed(range(cfg.n_layers)):
            caches, layer_in = layer_caches[l]
            if drop_masks[l] is not None:
                dinp = dinp * drop_masks[l]
            p = self.layer_params(l)
            g = {k: np.zeros_like(v) for k, v in p.items()}
            dx = np.zeros_like(layer_in)
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            for t in reversed(range(W)):
                m = mask[:, t:t + 1]
                dh = dinp[:, t] + dh_next
                dh_valid = dh * m
                dc_valid = dc_next * m
                dx_t, dh_prev, dc_prev = cell_step_backward(dh_valid, dc_valid, caches[t], p, g)
                dx[:, t] = dx_t
                # masked frames pass the state gradient straight through
                dh_next = dh_prev + dh * (1 - m)
                dc_next = dc_prev + dc_next * (1 - m)
            for k, v in g.items():
                grads[f"l{l}.{k}"] = v
            dinp = dx
        return loss, grads, new_state

    # -- persistence -------------------------------------------------------

    def save(self, path, meta=None) -> Path:
        return checkpoint.save(path, "lstm", self.config.to_dict(), self.params, self.layers, meta)

    @classmethod
    def from_arrays(cls, config: dict, arrays: dict) -> "LSTM":
        model = cls(LstmConfig(**config), seed=0)
        for name in model.params:
            if arrays[name].shape != model.params[name].shape:
                raise ValueError(f"checkpoint array {name} has shape {arrays[name].shape}")
            model.params[name] = arrays[name].copy()
        return model

    @classmethod
    def load(cls, path) -> "LSTM":
        header, arrays = checkpoint.load(path)
        if header["kind"] != "lstm":
            raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not an LSTM")
        return cls.from_arrays(header["config"], arrays)


def build(config: LstmConfig, seed=0) -> LSTM:
    return LSTM(config, seed)


def forward(model: LSTM, x) -> np.ndarray:
    return model.forward(x)


def _pad_batch(data, idx, n_features):
    T = max(data[i][0].shape[0] for i in idx)
    x = np.zeros((len(idx), T, n_features))
    y = np.zeros((len(idx), T), dtype=np.int64)
    mask = np.zeros((len(idx), T))
    for r, i in enumerate(idx):
        xi, yi = data[i]
        x[r, :len(yi)] = xi
        y[r, :len(yi)] = yi
        mask[r, :len(yi)] = 1.0
    return x, y, mask


def train(model: LSTM, data: Sequence, opts: LstmTrainOptions | None = None):
    """Truncated-BPTT SGD on ``(features, labels)`` pairs; returns (model, losses)."""
    opts = opts or LstmTrainOptions()
    cfg = model.config
    data = [(np.asarray(getattr(x, "data", x), dtype=np.float64),
             np.asarray(getattr(y, "labels", y), dtype=np.int64)) for x, y in data]
    if not data:
        raise ValueError("empty training set")
    for x, y in data:
        if x.ndim != 2 or x.shape[1] != cfg.n_features or x.shape[0] != y.shape[0]:
            raise ValueError("training pair has inconsistent shape")
    rng = np.random.default_rng(opts.seed)
    opt = nn.Optimizer("sgd", cfg.learning_rate)
    losses = []
    for epoch in range(opts.epochs):
        if epoch >= cfg.decay_after:
            opt.learning_rate = cfg.learning_rate * cfg.decay ** (epoch - cfg.decay_after + 1)
        order = rng.permutation(len(data))
        epoch_losses, weights = [], []
        for start in range(0, len(order), opts.batch_size):
            x, y, mask = _pad_batch(data, order[start:start + opts.batch_size], cfg.n_features)
            state = model.initial_state(x.shape[0])
            for w0 in range(0, x.shape[1], cfg.tbptt_window):
                sl = slice(w0, w0 + cfg.tbptt_window)
                loss, grads, state = model.window_loss_and_grads(x[:, sl], y[:, sl], mask[:, sl], state, rng)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite LSTM loss at epoch {epoch}, frame {w0}")
                nn.clip_global_norm(grads, cfg.clip_norm)
                opt.step(model.params, grads)
                epoch_losses.append(loss)
                weights.append(mask[:, sl].sum())
        losses.append(float(np.average(epoch_losses, weights=weights)))
        log.debug("lstm epoch %d loss %.5f", epoch, losses[-1])
        if opts.checkpoint_dir:
            model.save(Path(opts.checkpoint_dir) / f"lstm_epoch{epoch:03d}.ckpt", {"epoch": epoch})
        if opts.on_epoch:
            opts.on_epoch(epoch, losses[-1], model)
    return model, losses


def grid_search(grid: dict | None, folds: Sequence, base: LstmConfig, opts: LstmTrainOptions | None = None):
    """Exhaustive search over ``grid`` (defaults to the default 2x2x4x2 grid).

    ``folds`` is a list of ``(train_pairs, val_pairs)``. The winner has the
    highest mean validation frame accuracy; ties go to fewer parameters,
    then the lower learning rate. Returns ``(best_config, results)`` where
    ``results`` lists ``(config, mean_accuracy)`` in grid order.
    """
    grid = dict(DEFAULT_GRID if grid is None else grid)
    if not folds:
        raise ValueError("grid search needs at least one validation fold")
    keys = sorted(grid)
    cells = list(itertools.product(*(grid[k] for k in keys)))
    if not cells:
        raise ValueError("empty grid")
    opts = opts or LstmTrainOptions()
    results = []
    for values in cells:
        cfg = replace(base, **dict(zip(keys, values)))
        accs = []
        for train_pairs, val_pairs in folds:
            model = LSTM(cfg, seed=opts.seed)
            train(model, train_pairs, opts)
            hits = sum(int(np.sum(model.forward(x).argmax(1) == np.asarray(getattr(y, "labels", y))))
                       for x, y in val_pairs)
            total = sum(len(getattr(y, "labels", y)) for _, y in val_pairs)
            accs.append(100.0 * hits / total)
        mean_acc = float(np.mean(accs))
        log.info("grid cell %s -> %.2f%%", dict(zip(keys, values)), mean_acc)
        results.append((cfg, mean_acc, cfg.n_params()))
    best = min(results, key=lambda r: (-r[1], r[2], r[0].learning_rate))
    return best[0], [(c, a) for c, a, _ in results]
