import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

settings.register_profile(
    "default", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_psd(rng, n, rank=None):
    r = n + 2 if rank is None else rank
    V = rng.standard_normal((n, r))
    return V @ V.T / r


def unit_rows(rng, n, d):
    V = rng.standard_normal((n, d))
    return V / np.linalg.norm(V, axis=1, keepdims=True)


@st.composite
def psd_kernels(draw, min_n=1, max_n=10):
    """Gram matrices of seeded Gaussian factors, possibly rank deficient."""
    n = draw(st.integers(min_n, max_n))
    rank = draw(st.integers(1, n + 2))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_psd(np.random.default_rng(seed), n, rank)


@st.composite
def full_rank_kernels(draw, min_n=1, max_n=10):
    n = draw(st.integers(min_n, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_psd(np.random.default_rng(seed), n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}  {'PASS' if passed else 'FAIL'}  {detail}")
