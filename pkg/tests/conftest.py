import itertools

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_force_states(X, C, lam):
    """Minimizer over all K^T sequences; first in lexicographic order wins ties."""
    X = np.atleast_2d(X)
    if X.shape[0] == 1 and C.shape[1] != 1:
        pass
    T, K = X.shape[0], C.shape[0]
    L = 0.5 * ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    best, best_seq = np.inf, None
    for seq in itertools.product(range(K), repeat=T):
        s = np.array(seq)
        val = L[np.arange(T), s].sum() + lam * np.count_nonzero(s[1:] != s[:-1])
        if val < best - 1e-12:
            best, best_seq = val, s
    return best_seq, best


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
