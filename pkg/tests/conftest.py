import numpy as np
import pytest

from maskalign.autodiff import Tape, Tensor


def numeric_grad(fn, arrays, eps=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every entry of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(*arrays)
            flat[i] = orig - eps
            down = fn(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def check_grads(op, *arrays, eps=1e-5, tol=1e-3):
    """Assert the tape gradient of ``sum(op(*tensors) * w)`` matches central differences.

    A fixed random weighting makes every output entry matter.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    w = np.random.default_rng(0).normal(size=probe.shape)

    def value(*xs):
        return float(np.sum(op(*[Tensor(x) for x in xs]).data * w))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*leaves)
        from maskalign.autodiff import mul, sum as tsum
        tape.backward(tsum(mul(out, Tensor(w))))
    numeric = numeric_grad(value, [a.copy() for a in arrays], eps)
    for leaf, num in zip(leaves, numeric):
        got = leaf.grad if leaf.grad is not None else np.zeros_like(num)
        scale = np.maximum(np.maximum(np.abs(got), np.abs(num)), 1e-7)
        assert np.max(np.abs(got - num) / scale) <= tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
