import numpy as np
import pytest

from mtgan.tensor import Tensor


def numeric_grad(f, arrays, eps=1e-3):
    """Central differences of scalar f(*arrays) with respect to every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*ts).backward()
    return [t.grad for t in ts]


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def gradcheck(build, arrays, eps=1e-3):
    """Max relative error between autodiff and finite-difference gradients (float64)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def scalar(*xs):
        return build(*[Tensor(x) for x in xs]).item()

    num = numeric_grad(scalar, arrays, eps)
    ana = analytic_grad(build, arrays)
    return max(rel_error(n, a) for n, a in zip(num, ana))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
