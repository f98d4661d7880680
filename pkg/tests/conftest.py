import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_orthonormal(rng, m):
    q, r = np.linalg.qr(rng.standard_normal((m, m)))
    return q * np.sign(np.diag(r))


def triple_loop_matmul(a, b):
    """Reference product with explicit loops, no BLAS."""
    n, k = len(a), len(a[0])
    c = len(b[0])
    out = [[0.0] * c for _ in range(n)]
    for i in range(n):
        for j in range(c):
            acc = 0.0
            for p in range(k):
                acc += float(a[i][p]) * float(b[p][j])
            out[i][j] = acc
    return np.array(out)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
