"""Numeric building blocks for the temporal models.

Every array is time-major (``T x F``) and float64. Layers come as
forward/backward function pairs: the forward returns the output together
with a cache tuple, the backward consumes that cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5
LOG_FLOOR = 1e-12
_ROW_BLOCK = 64


def rowstable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` whose row ``i`` is bitwise independent of ``a.shape[0]``.

    BLAS picks different kernels for different row counts, which changes
    rounding. Multiplying fixed 64-row blocks keeps each row's result the
    same for a prefix of the stream or a block-aligned window of it, which
    the causal prefix and streaming guarantees rely on.
    """
    m = a.shape[0]
    nb = -(-m // _ROW_BLOCK)
    if nb == 0:
        return np.zeros((0, b.shape[1]))
    padded = np.zeros((nb * _ROW_BLOCK, a.shape[1]))
    padded[:m] = a
    out = np.matmul(padded.reshape(nb, _ROW_BLOCK, -1), b)
    return out.reshape(nb * _ROW_BLOCK, -1)[:m]


# -- convolution ----------------------------------------------------------


def conv_padding(k: int, causal: bool) -> tuple[int, int]:
    """Zero padding (left, right) that keeps the output length equal to T.

    Causal: ``k - 1`` frames on the left, which is the same as padding k/2
    on the left of a same-padded convolution and cropping k/2 on the right.
    """
    if causal:
        return k - 1, 0
    return k // 2, k - 1 - k // 2


def _im2col(x: np.ndarray, k: int, pad: tuple[int, int]) -> np.ndarray:
    t, f = x.shape
    xpad = np.zeros((t + pad[0] + pad[1], f))
    xpad[pad[0]:pad[0] + t] = x
    # (T_out, F, k) -> (T_out, k, F)
    win = sliding_window_view(xpad, k, axis=0)
    return np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(win.shape[0], k * f)


def conv1d_forward(x, W, b, causal: bool = False, pad: tuple[int, int] | None = None,
                   return_cache: bool = False):
    """Temporal convolution followed by ReLU.

    ``W`` has shape ``(F_out, k, F_in)``: ``out[t] = relu(sum_j W[:, j] @ xpad[t + j] + b)``.
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    f_out, k, f_in = W.shape
    if x.ndim != 2 or x.shape[1] != f_in:
        raise ValueError(f"input has shape {x.shape}, kernel expects {f_in} channels")
    pad = conv_padding(k, causal) if pad is None else pad
    if x.shape[0] + pad[0] + pad[1] < k:
        raise ValueError("sequence shorter than the kernel after padding")
    cols = _im2col(x, k, pad)
    pre = rowstable_matmul(cols, W.reshape(f_out, k * f_in).T) + b
    out = np.maximum(pre, 0.0)
    if return_cache:
        return out, (cols, pre, W, pad, x.shape[0])
    return out


def conv1d_backward(dout, cache):
    cols, pre, W, pad, t_in = cache
    f_out, k, f_in = W.shape
    dpre = dout * (pre > 0)
    dW = (dpre.T @ cols).reshape(W.shape)
    db = dpre.sum(axis=0)
    dcols = (dpre @ W.reshape(f_out, k * f_in)).reshape(-1, k, f_in)
    t_out = dcols.shape[0]
    dxpad = np.zeros((t_in + pad[0] + pad[1], f_in))
    for j in range(k):
        dxpad[j:j + t_out] += dcols[:, j, :]
    return dxpad[pad[0]:pad[0] + t_in], dW, db


# -- pooling / upsampling -------------------------------------------------


def _pool_pairs(t: int, causal: bool) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(-(-t // 2))
    if causal:
        # window (2i-1, 2i): never looks past frame 2i
        return np.maximum(2 * i - 1, 0), 2 * i
    # window (2i, 2i+1), odd T repeats the last frame
    return 2 * i, np.minimum(2 * i + 1, t - 1)


def _maxpool2(x, causal=False):
    first, second = _pool_pairs(x.shape[0], causal)
    a, b = x[first], x[second]
    take_first = a >= b
    src = np.where(take_first, first[:, None], second[:, None])
    return np.where(take_first, a, b), (src, x.shape)


def maxpool2(x, causal: bool = False, return_cache: bool = False):
    """Stride-2 max pooling along time; output length ``ceil(T/2)``.

    Non-causal windows are frame pairs (2i, 2i+1) with an odd tail padded by
    repeating the final frame. Causal windows are (2i-1, 2i) so an output
    never depends on a later input frame. Ties go to the earlier frame.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("maxpool2 needs T >= 2")
    out, cache = _maxpool2(x, causal)
    return (out, cache) if return_cache else out


def maxpool2_backward(dout, cache):
    src, shape = cache
    dx = np.zeros(shape)
    cols = np.broadcast_to(np.arange(shape[1]), src.shape)
    np.add.at(dx, (src, cols), dout)
    return dx


def upsample2(x):
    return np.repeat(np.asarray(x, dtype=np.float64), 2, axis=0)


def upsample2_backward(dout):
    return dout.reshape(-1, 2, dout.shape[1]).sum(axis=1)


# -- normalisation --------------------------------------------------------


def channel_max_normalize(E, eps: float = NORM_EPS, denom=None, return_cache: bool = False):
    """Divide each frame by its largest channel value plus ``eps``.

    Inputs are post-ReLU, hence non-negative; negative maxima are outside
    the contract and are not guarded. ``denom`` overrides the per-frame
    denominators (used to check the stop-gradient backward).
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim == 1:
        return E / (E.max() + eps)
    if denom is None:
        denom = E.max(axis=1, keepdims=True) + eps
    out = E / denom
    return (out, (E, denom)) if return_cache else out


def channel_max_normalize_backward(dout, cache, mode: str = "stop"):
    """Backward of the max normalisation.

    ``"stop"`` treats the denominator as a constant; ``"full"`` also routes
    the gradient through the max (to the first maximal channel).
    """
    E, denom = cache
    dE = dout / denom
    if mode == "full":
        arg = E.argmax(axis=1)
        rows = np.arange(E.shape[0])
        dE[rows, arg] -= np.sum(dout * E, axis=1) / denom[:, 0] ** 2
    elif mode != "stop":
        raise ValueError(f"unknown normalisation gradient mode {mode!r}")
    return dE


# -- output head ----------------------------------------------------------


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_dense(x, W, b, return_cache: bool = False):
    """Time-distributed affine map followed by a row softmax."""
    x = np.asarray(x, dtype=np.float64)
    probs = softmax(rowstable_matmul(x, W) + b)
    return (probs, (x, W, probs)) if return_cache else probs


def cross_entropy_loss(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(getattr(gt, "labels", gt), dtype=np.int64)
    if pred.ndim != 2 or pred.shape[0] != gt.shape[0]:
        raise ValueError(f"prediction shape {pred.shape} does not match {gt.shape[0]} labels")
    picked = pred[np.arange(gt.shape[0]), gt]
    return float(np.mean(-np.log(np.maximum(picked, LOG_FLOOR))))


def softmax_dense_ce_backward(cache, gt, weight: float | None = None):
    """Gradients of the mean cross-entropy w.r.t. (x, W, b) of the head."""
    x, W, probs = cache
    t = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(t), gt] -= 1.0
    dlogits *= (1.0 / t) if weight is None else weight
    return dlogits @ W.T, x.T @ dlogits, dlogits.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


# -- optimisers -----------------------------------------------------------


@dataclass
class Optimizer:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    state: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    def step(self, params: dict, grads: dict) -> dict:
        if self.kind == "adam":
            return adam_step(params, grads, self)
        return sgd_step(params, grads, self)


def sgd_step(params: dict, grads: dict, opt: Optimizer) -> dict:
    opt.step_count += 1
    for name, g in grads.items():
        params[name] -= opt.learning_rate * g
    return params


def adam_step(params: dict, grads: dict, opt: Optimizer) -> dict:
    opt.step_count += 1
    t = opt.step_count
    for name, g in grads.items():
        m, v = opt.state.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        opt.state[name] = (m, v)
        m_hat = m / (1 - opt.beta1 ** t)
        v_hat = v / (1 - opt.beta2 ** t)
        params[name] -= opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
    return params


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# -- initialisation -------------------------------------------------------


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# -- gradient checking ----------------------------------------------------


def numeric_gradient(loss_fn: Callable[[], float], array: np.ndarray, index, step: float = 1e-5) -> float:
    """Central finite difference of ``loss_fn`` w.r.t. ``array[index]`` (in place)."""
    orig = array[index]
    array[index] = orig + step
    up = loss_fn()
    array[index] = orig - step
    down = loss_fn()
    array[index] = orig
    return (up - down) / (2 * step)


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(loss_fn: Callable[[], float], params: dict, grads: dict, step: float = 1e-5,
                    max_per_param: int | None = None, rng: np.random.Generator | None = None) -> dict:
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    Returns the largest elementwise relative error per parameter name.
    ``max_per_param`` samples that many entries per tensor instead of all.
    """
    rng = rng or np.random.default_rng(0)
    worst = {}
    for name, arr in params.items():
        flat_idx = np.arange(arr.size)
        if max_per_param is not None and arr.size > max_per_param:
            flat_idx = rng.choice(arr.size, size=max_per_param, replace=False)
        errs = []
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            num = numeric_gradient(loss_fn, arr, idx, step)
            errs.append(float(relative_error(grads[name][idx], num)))
        worst[name] = max(errs) if errs else 0.0
    return worst
