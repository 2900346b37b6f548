import logging
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure repo root is importable
REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from shapereg.problem import Dataset, ProblemInstance, build_instance  # noqa: E402


@pytest.fixture(autouse=True)
def _package_logger():
    # run_cli installs its own handler and stops propagation; undo that between tests
    yield
    log = logging.getLogger("shapereg")
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    log.propagate = True
    log.setLevel(logging.NOTSET)


@pytest.fixture()
def isolated_env(tmp_path, monkeypatch):
    # No stray .env or SHAPEREG_* variables from the developer shell.
    # setenv first so the undo also removes values a .env load puts in os.environ.
    for name in ["SHAPEREG_LOG", "SHAPEREG_LOG_FILE", "SHAPEREG_THREADS", "SHAPEREG_BLOCKS", "SHAPEREG_SEED"]:
        monkeypatch.setenv(name, "")
        monkeypatch.delenv(name)
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


def random_dataset(n: int, d: int, seed: int = 0, fn=None) -> Dataset:
    r = np.random.default_rng(seed)
    P = r.uniform(-1.0, 1.0, size=(n, d))
    clean = fn(P) if fn is not None else np.sum(P * P, axis=1)
    return Dataset.from_points(P, clean + 0.1 * r.standard_normal(n))


@pytest.fixture()
def small_dataset():
    return random_dataset(12, 2, seed=3)


@pytest.fixture()
def small_instance(small_dataset) -> ProblemInstance:
    return build_instance(small_dataset)


def dense_operators(problem: ProblemInstance) -> tuple[np.ndarray, np.ndarray]:
    """Explicit A (n^2 x n) and B (n^2 x nd) in row order k = i*n + j."""
    n, d = problem.n, problem.d
    P = problem.points
    A = np.zeros((n * n, n))
    B = np.zeros((n * n, n * d))
    for i in range(n):
        for j in range(n):
            k = i * n + j
            A[k, j] += 1.0
            A[k, i] -= 1.0
            B[k, i * d:(i + 1) * d] = P[i] - P[j]
    return A, B


@pytest.fixture()
def dense_ops():
    return dense_operators
