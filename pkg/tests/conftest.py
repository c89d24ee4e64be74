import numpy as np
import pytest

from sharingan import tensor as T


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() with respect to ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def max_rel_err(a: np.ndarray, n: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    floor = max(1e-3 * float(np.abs(n).max(initial=0.0)), 1e-12)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max(initial=0.0))


def check_grads(build, arrays, h=1e-5):
    """build(*tensors) -> scalar Tensor. Returns the worst relative error over all inputs."""
    with T.default_dtype(np.float64):
        ts = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        T.backward(build(*ts))
        worst = 0.0
        for t in ts:
            num = numeric_grad(lambda: build(*ts).item(), t.data, h)
            worst = max(worst, max_rel_err(t.grad, num))
    return worst


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(crit: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {crit}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
