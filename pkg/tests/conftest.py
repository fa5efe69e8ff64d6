import numpy as np
import pytest

from statefuse import simgen
from statefuse.core import FeatureSequence, StateSequence, StateVocab, TrialBundle


def make_trial(labels, user="U1", trial="T1", dims=(3, 4, 2), seed=0, n_states=None, rate=10.0):
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    T = labels.size
    b = n_states or int(labels.max()) + 1
    vocab = StateVocab(tuple(f"s{i}" for i in range(max(b, 2))))
    return TrialBundle(
        FeatureSequence(rng.normal(size=(T, dims[0])), rate),
        FeatureSequence(rng.normal(size=(T, dims[1])), rate),
        FeatureSequence(rng.integers(0, 2, size=(T, dims[2])).astype(float), rate),
        StateSequence(labels, vocab.size),
        user, trial, vocab,
    )


@pytest.fixture
def small_trials():
    """Six short noisy benchmark trials from three users."""
    spec = simgen.load_task("benchmark")
    return simgen.generate_trials(spec, 6, 3, seed=3, noise=simgen.NOISE_PRESETS["benchmark"],
                                  dims=(5, 6, 6), max_frames=150)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line for an acceptance criterion and return the verdict."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def _record(number, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
