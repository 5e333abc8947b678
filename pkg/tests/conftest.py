import numpy as np
import pytest
from hypothesis import strategies as st

from romit.bitdist import SignedDist


def random_sparse(rng, n, size, p0=None, signed=False):
    """Random sparse distribution on n bits; weight p0 at zero when given."""
    size = min(size, (1 << n) - 1)
    keys = rng.choice(np.arange(1, 1 << n), size=size, replace=False)
    if signed:
        w = rng.normal(size=size)
        return SignedDist(n, {0: 1.0 - w.sum(), **{int(k): float(v) for k, v in zip(keys, w)}})
    if p0 is None:
        p0 = rng.uniform(0.5, 1)
    w = rng.dirichlet(np.ones(size)) * (1 - p0)
    return SignedDist(n, {0: p0, **{int(k): float(v) for k, v in zip(keys, w)}})


@st.composite
def sparse_dists(draw, n=None, max_n=8, min_p0=None, signed=False):
    n = draw(st.integers(1, max_n)) if n is None else n
    seed = draw(st.integers(0, 2**32 - 1))
    size = draw(st.integers(1, 12))
    rng = np.random.default_rng(seed)
    p0 = None if min_p0 is None else rng.uniform(min_p0, 1)
    return random_sparse(rng, n, size, p0=p0, signed=signed)


def within_sigma(observed, expected, shots, k=3.0):
    sigma = np.sqrt(max(expected * (1 - expected), 1e-12) / shots)
    return abs(observed - expected) <= k * sigma + 1e-12


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
