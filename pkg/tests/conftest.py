import numpy as np
import pytest

from udimlab.domains import DomainDataset
from udimlab.nn_core import mlp_init


def random_case(seed, dims=None, loss_kind="ce", n=6, activation="tanh"):
    """Small random model plus a batch drawn from the same seed."""
    rng = np.random.default_rng([seed, 99])
    if dims is None:
        d_in = int(rng.integers(2, 5))
        hidden = [int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3))]
        dims = [d_in, *hidden, int(rng.integers(2, 4))]
    m = mlp_init(dims, loss_kind, seed, activation)
    X = rng.normal(size=(n, dims[0]))
    y = rng.integers(0, dims[-1], size=n)
    return m, DomainDataset("rand", X, y, dims[-1])


def central_fd(f, x, step=1e-5):
    x = np.array(x, dtype=np.float64)
    out = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f(x)
        flat[i] = old - step
        lo = f(x)
        flat[i] = old
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-12)


@pytest.fixture
def case():
    return random_case(0)


def loop_variance(samples):
    """Independent element-by-element two-pass variance (divisor n - 1), shifted by row 0."""
    n, k = samples.shape
    out = np.zeros(k)
    for j in range(k):
        ref = samples[0, j]
        total = 0.0
        for i in range(n):
            total += samples[i, j] - ref
        mean = total / n
        acc = 0.0
        for i in range(n):
            dev = (samples[i, j] - ref) - mean
            acc += dev * dev
        out[j] = acc / (n - 1)
    return out


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Log one acceptance line, then assert it."""
    def _record(number, title, ok, detail):
        ACCEPTANCE_LINES.append((number, "PASS" if ok else "FAIL", title, detail))
        assert ok, f"criterion {number} ({title}): {detail}"
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}: {detail}")
