import numpy as np
import pytest

from gage.tensor import Tensor


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of the scalar ``f(*arrays)`` w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    out.backward(params=ts)
    return [t.grad for t in ts]


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def gradcheck():
    """``check(build, arrays)``: analytic vs central-difference gradients in float64."""

    def check(build, arrays, tol=1e-4):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        got = analytic_grad(build, arrays)
        want = numeric_grad(lambda *xs: float(build(*[Tensor(x) for x in xs]).data), arrays)
        errs = [rel_error(g, w) for g, w in zip(got, want)]
        assert max(errs) < tol, errs
        return max(errs)

    return check


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one pass/fail line, shown in the terminal summary."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
