import numpy as np
import pytest

from aenet import tensorcore as tc


def numeric_grad(fn, arrays, h=1e-4):
    """Central finite differences of the scalar ``fn()`` w.r.t. every entry of ``arrays`` (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = fn()
            a[idx] = old - h
            fm = fn()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


def gradcheck(build, shapes, rng, h=1e-4, low=-1.0, high=1.0):
    """Compare autodiff and finite-difference gradients of ``build(*vars)`` at one random point."""
    params = [tc.parameter(rng.uniform(low, high, size=s)) for s in shapes]
    loss = build(*params)
    tc.backward(loss)
    numeric = numeric_grad(lambda: float(build(*params).value), [p.value for p in params], h)
    return max(rel_err(p.grad, n) for p, n in zip(params, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the summary, then assert."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line

    return record
