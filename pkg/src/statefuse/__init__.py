"""Multi-modal temporal state estimation with odds-ratio weighted fusion."""

from .core import (ConfigError, DataError, FeatureSequence, NumericError, Segment, StateSequence,
                   StateVocab, TrialBundle, louo_splits, segment_runs)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "FeatureSequence", "NumericError", "Segment", "StateSequence",
    "StateVocab", "TrialBundle", "louo_splits", "segment_runs",
]
