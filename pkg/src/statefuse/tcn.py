"""Encoder-decoder temporal convolutional sequence labeler.

Encoder layer: conv -> max-pool(2) -> per-frame max normalisation.
Decoder layer: upsample(2) -> crop to the matching encoder length -> conv
-> normalisation. A time-distributed softmax head produces one state
distribution per frame. In causal mode the convolutions are left-padded and
the pooling windows never reach forward in time, so output frame ``t`` only
depends on input frames ``0..t``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, nn
from .core import ConfigError, NumericError

log = logging.getLogger(__name__)


def kernel_frames(kernel_seconds: float, sample_rate_hz: float) -> int:
    """Kernel length in frames: nearest integer, bumped to odd."""
    k = max(1, int(math.floor(kernel_seconds * sample_rate_hz + 0.5)))
    return k + 1 if k % 2 == 0 else k


@dataclass(frozen=True)
class TcnConfig:
    n_features: int
    n_states: int
    filters: tuple[int, ...] = (32, 64, 96)
    kernel_seconds: float = 3.4
    sample_rate_hz: float = 10.0
    causal: bool = True
    n_layers: int | None = None
    norm_grad: str = "stop"

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.n_layers is None:
            object.__setattr__(self, "n_layers", len(self.filters))
        if self.n_layers < 1:
            raise ConfigError("a TCN needs at least one layer")
        if len(self.filters) != self.n_layers:
            raise ConfigError(f"{self.n_layers} layers but {len(self.filters)} filter counts")
        if min(self.filters) < 1 or self.n_features < 1 or self.n_states < 2:
            raise ConfigError("filter counts, n_features must be >= 1 and n_states >= 2")
        if not self.kernel_seconds > 0 or not self.sample_rate_hz > 0:
            raise ConfigError("kernel_seconds and sample_rate_hz must be positive")
        if self.norm_grad not in ("stop", "full"):
            raise ConfigError(f"norm_grad must be 'stop' or 'full', got {self.norm_grad!r}")

    @property
    def kernel(self) -> int:
        return kernel_frames(self.kernel_seconds, self.sample_rate_hz)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d


@dataclass
class TcnTrainOptions:
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 1
    seed: int = 0
    shuffle: bool = True
    checkpoint_dir: str | None = None
    on_epoch: Callable | None = field(default=None, repr=False)


class TCN:
    def __init__(self, config: TcnConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        k = config.kernel
        self.params: dict[str, np.ndarray] = {}
        f_prev = config.n_features
        for l, f in enumerate(config.filters):
            self.params[f"enc{l}.W"] = nn.glorot(rng, (f, k, f_prev), k * f_prev, f)
            self.params[f"enc{l}.b"] = np.zeros(f)
            f_prev = f
        for m, f in enumerate(reversed(config.filters)):
            self.params[f"dec{m}.W"] = nn.glorot(rng, (f, k, f_prev), k * f_prev, f)
            self.params[f"dec{m}.b"] = np.zeros(f)
            f_prev = f
        self.params["head.W"] = nn.glorot(rng, (f_prev, config.n_states), f_prev, config.n_states)
        self.params["head.b"] = np.zeros(config.n_states)

    @property
    def causal(self) -> bool:
        return self.config.causal

    @property
    def layers(self) -> list[str]:
        L = self.config.n_layers
        return ([f"enc{l}:conv-pool-norm" for l in range(L)]
                + [f"dec{m}:up-conv-norm" for m in range(L)] + ["head:dense-softmax"])

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def receptive_field(self) -> int:
        """Upper bound on how many past frames (causal mode) reach one output."""
        return 2 * self.config.kernel * (2 ** self.config.n_layers - 1)

    # -- forward / backward ----------------------------------------------

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(getattr(x, "data", x), dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.n_features:
            raise ValueError(f"expected T x {self.config.n_features} features, got {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("empty input stream")
        return x

    def forward(self, x, denoms: list | None = None, return_cache: bool = False):
        """Per-frame state distributions for a ``T x N`` stream.

        ``denoms`` replaces the normalisation denominators layer by layer,
        which is only useful when checking the stop-gradient backward.
        """
        x = self._check_input(x)
        cfg, p = self.config, self.params
        causal = cfg.causal
        caches = []
        lengths = [x.shape[0]]
        used_denoms = []
        it = iter(denoms) if denoms is not None else None
        h = x
        for l in range(cfg.n_layers):
            h, c_conv = nn.conv1d_forward(h, p[f"enc{l}.W"], p[f"enc{l}.b"], causal, return_cache=True)
            h, c_pool = nn._maxpool2(h, causal)
            h, c_norm = nn.channel_max_normalize(h, denom=next(it) if it else None, return_cache=True)
            used_denoms.append(c_norm[1])
            lengths.append(h.shape[0])
            caches.append((c_conv, c_pool, c_norm))
        for m in range(cfg.n_layers):
            target = lengths[cfg.n_layers - 1 - m]
            up_len = 2 * h.shape[0]
            h = nn.upsample2(h)[:target]
            h, c_conv = nn.conv1d_forward(h, p[f"dec{m}.W"], p[f"dec{m}.b"], causal, return_cache=True)
            h, c_norm = nn.channel_max_normalize(h, denom=next(it) if it else None, return_cache=True)
            used_denoms.append(c_norm[1])
            caches.append((up_len, c_conv, c_norm))
        probs, c_head = nn.softmax_dense(h, p["head.W"], p["head.b"], return_cache=True)
        if return_cache:
            return probs, (caches, c_head, used_denoms)
        return probs

    __call__ = forward

    def backward(self, cache, gt) -> dict[str, np.ndarray]:
        caches, c_head, _ = cache
        cfg = self.config
        mode = cfg.norm_grad
        grads = {}
        dh, grads["head.W"], grads["head.b"] = nn.softmax_dense_ce_backward(c_head, gt)
        L = cfg.n_layers
        for m in reversed(range(L)):
            up_len, c_conv, c_norm = caches[L + m]
            dh = nn.channel_max_normalize_backward(dh, c_norm, mode)
            dh, grads[f"dec{m}.W"], grads[f"dec{m}.b"] = nn.conv1d_backward(dh, c_conv)
            full = np.zeros((up_len, dh.shape[1]))
            full[:dh.shape[0]] = dh
            dh = nn.upsample2_backward(full)
        for l in reversed(range(L)):
            c_conv, c_pool, c_norm = caches[l]
            dh = nn.channel_max_normalize_backward(dh, c_norm, mode)
            dh = nn.maxpool2_backward(dh, c_pool)
            dh, grads[f"enc{l}.W"], grads[f"enc{l}.b"] = nn.conv1d_backward(dh, c_conv)
        return grads

    def loss_and_grads(self, x, gt):
        gt = np.asarray(getattr(gt, "labels", gt), dtype=np.int64)
        probs, cache = self.forward(x, return_cache=True)
        return nn.cross_entropy_loss(probs, gt), self.backward(cache, gt)

    # -- persistence -------------------------------------------------------

    def save(self, path, meta=None) -> Path:
        return checkpoint.save(path, "tcn", self.config.to_dict(), self.params, self.layers, meta)

    @classmethod
    def from_arrays(cls, config: dict, arrays: dict) -> "TCN":
        model = cls(TcnConfig(**config), seed=0)
        for name in model.params:
            if arrays[name].shape != model.params[name].shape:
                raise ValueError(f"checkpoint array {name} has shape {arrays[name].shape}")
            model.params[name] = arrays[name].copy()
        return model

    @classmethod
    def load(cls, path) -> "TCN":
        header, arrays = checkpoint.load(path)
        if header["kind"] != "tcn":
            raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not a TCN")
        return cls.from_arrays(header["config"], arrays)


def build(config: TcnConfig, seed: int | np.random.Generator = 0) -> TCN:
    return TCN(config, seed)


def forward(model: TCN, x) -> np.ndarray:
    return model.forward(x)


def frame_accuracy(model, data) -> float:
    hits = total = 0
    for x, y in data:
        y = np.asarray(getattr(y, "labels", y))
        pred = model.forward(x).argmax(axis=1)
        hits += int(np.sum(pred == y))
        total += y.size
    return 100.0 * hits / total


def train(model: TCN, data: Sequence, opts: TcnTrainOptions | None = None):
    """Fit ``model`` on ``(features, labels)`` pairs with Adam on cross-entropy.

    Returns ``(model, losses)`` where ``losses[e]`` is the mean trial loss of
    epoch ``e``. Parameters are updated in place.
    """
    opts = opts or TcnTrainOptions()
    data = [(model._check_input(x), np.asarray(getattr(y, "labels", y), dtype=np.int64)) for x, y in data]
    if not data:
        raise ValueError("empty training set")
    for x, y in data:
        if x.shape[0] != y.shape[0]:
            raise ValueError("features and labels differ in length")
    rng = np.random.default_rng(opts.seed)
    opt = nn.Optimizer("adam", opts.learning_rate)
    losses = []
    for epoch in range(opts.epochs):
        order = rng.permutation(len(data)) if opts.shuffle else np.arange(len(data))
        epoch_loss = []
        for start in range(0, len(order), opts.batch_size):
            batch = order[start:start + opts.batch_size]
            acc = None
            for i in batch:
                loss, grads = model.loss_and_grads(*data[i])
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite TCN loss at epoch {epoch}, trial index {i}")
                epoch_loss.append(loss)
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            for k in acc:
                acc[k] /= len(batch)
            opt.step(model.params, acc)
        losses.append(float(np.mean(epoch_loss)))
        log.debug("tcn epoch %d loss %.5f", epoch, losses[-1])
        if opts.checkpoint_dir:
            model.save(Path(opts.checkpoint_dir) / f"tcn_epoch{epoch:03d}.ckpt", {"epoch": epoch})
        if opts.on_epoch:
            opts.on_epoch(epoch, losses[-1], model)
    return model, losses
