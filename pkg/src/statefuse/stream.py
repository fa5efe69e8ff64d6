"""Frame-at-a-time inference with bounded memory and latency.

Each runner consumes one feature vector per call and returns that frame's
state distribution, matching batch causal inference exactly.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import events, fusion, lstm, tcn
from .core import ConfigError
from .nn import _ROW_BLOCK


class TcnStream:
    """Sliding-window runner for a causal TCN.

    The window always covers the receptive field and starts on a multiple of
    ``64 * 2**L`` frames, so pooling pairs and matmul row blocks line up with
    the batch computation and the last output is bit-identical.
    """

    def __init__(self, model: tcn.TCN):
        if not model.causal:
            raise ConfigError("streaming needs a causal TCN; this checkpoint was trained non-causal")
        self.model = model
        self.align = _ROW_BLOCK * 2 ** model.config.n_layers
        self.horizon = model.receptive_field()
        self.capacity = self.horizon + 2 * self.align
        self._buf = np.empty((self.capacity, model.config.n_features))
        self._n = 0

    def reset(self):
        self._n = 0

    def push(self, x_t) -> np.ndarray:
        if self._n == self.capacity:
            # drop whole aligned blocks that no future output can see
            keep = self.capacity - self.align
            self._buf[:keep] = self._buf[self.align:]
            self._n = keep
        self._buf[self._n] = x_t
        self._n += 1
        return self.model.forward(self._buf[:self._n])[-1]


class LstmStream:
    def __init__(self, model: lstm.LSTM):
        self.model = model
        self.state = model.initial_state()

    def reset(self):
        self.state = self.model.initial_state()

    def push(self, x_t) -> np.ndarray:
        probs, self.state = self.model.step(x_t, self.state)
        return probs


class EventStream:
    """Per-frame classifier; it has no temporal state."""

    def __init__(self, model: events.EnsembleModel):
        self.model = model

    def reset(self):
        pass

    def push(self, x_t) -> np.ndarray:
        return self.model.predict_proba(np.asarray(x_t, dtype=np.float64)[None, :])[0]


def runner_for(model):
    if isinstance(model, tcn.TCN):
        return TcnStream(model)
    if isinstance(model, lstm.LSTM):
        return LstmStream(model)
    if isinstance(model, events.EnsembleModel):
        return EventStream(model)
    raise ConfigError(f"no streaming runner for {type(model).__name__}")


class FusedStream:
    """Runs several component streams on their own slices of a joint frame.

    ``slices`` maps each component to the columns of the synchronized
    ``kin + vis + evt`` frame it reads. With a fusion model the output is the
    fused score; with a single component it is that component's distribution.
    """

    def __init__(self, runners: Sequence, slices: Sequence[slice], fusion_model: fusion.FusionModel | None = None):
        if fusion_model is None and len(runners) != 1:
            raise ConfigError("several components need a fusion model")
        self.runners = list(runners)
        self.slices = list(slices)
        self.fusion_model = fusion_model

    def reset(self):
        for r in self.runners:
            r.reset()

    def push(self, frame) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float64)
        outs = [r.push(frame[s]) for r, s in zip(self.runners, self.slices)]
        if self.fusion_model is None:
            return outs[0]
        return self.fusion_model.fuse([o[None, :] for o in outs])[0]

    def decide(self, frame) -> int:
        return int(fusion.decide(self.push(frame))[0])


def run_stream(runner, frames) -> np.ndarray:
    """Push every row of ``frames`` through ``runner``; returns stacked outputs."""
    return np.array([runner.push(f) for f in frames])
