import numpy as np
import pytest

from subpop.data import Dataset, GaussianSubpop, synth_gaussian_subpops

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def blobs3():
    """Three well separated 2-d blobs, labels 0, 1, 0."""
    spec = [GaussianSubpop([-6.0, 0.0], 0.5, 30, 0, "a"),
            GaussianSubpop([0.0, 6.0], 0.5, 30, 1, "b"),
            GaussianSubpop([6.0, 0.0], 0.5, 30, 0, "c")]
    return synth_gaussian_subpops(spec, seed=0)


def make_dataset(X, y, n_classes=None, **kw):
    return Dataset(np.asarray(X, dtype=float), np.asarray(y), n_classes, **kw)
