import numpy as np
import pytest

from lseope.data import LBFDataset, LinearSoftmaxPolicy, WeightedSamples


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def random_dataset(gen, n=20, k=3, d=4, binary=False):
    X = gen.standard_normal((n, d))
    a = gen.integers(0, k, n)
    p = gen.uniform(0.05, 1.0, n)
    r = (gen.random(n) < 0.5).astype(float) if binary else gen.uniform(0.0, 2.0, n)
    return LBFDataset(X, a, p, r, k)


def random_policy(gen, k=3, d=4, tau=1.0):
    return LinearSoftmaxPolicy(gen.standard_normal((k, d)), tau)


def random_samples(gen, n=50):
    pt = gen.uniform(0.01, 1.0, n)
    p0 = gen.uniform(0.01, 1.0, n)
    r = gen.uniform(0.0, 3.0, n)
    return WeightedSamples(pt / p0, r, pt, p0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def report_criterion(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
