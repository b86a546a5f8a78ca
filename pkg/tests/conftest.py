import numpy as np
import pytest

from msbfft.em_mpv import EmSettings, run_em
from msbfft.synth import random_case

# small well-posed problem shared by the likelihood / pcm / oracle tests
CASE = dict(m=2, n_s=2, n_r=4, n_lines=200, seed=1)


@pytest.fixture(scope="session")
def small_case():
    return random_case(**CASE)


@pytest.fixture(scope="session")
def small_mpv(small_case):
    theta, bands = small_case
    res = run_em(bands, theta0=theta,
                 settings=EmSettings(max_iter=5000, tol_rel_nllf=1e-14, tol_param=1e-10))
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# -- acceptance reporting -------------------------------------------------------------

CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line."""
    def record(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])

