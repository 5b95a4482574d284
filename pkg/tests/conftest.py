import numpy as np
import pytest

from rsfnet import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numerical_gradient(f, arrays, index, h=1e-5):
    """Central finite differences of f(arrays) w.r.t. arrays[index] (float64)."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(base[index])
    it = np.nditer(base[index], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[index][idx] += h
        minus[index][idx] -= h
        grad[idx] = (f(plus) - f(minus)) / (2 * h)
    return grad


def check_gradients(build, arrays, tol=1e-6, h=1e-5):
    """Compare analytic grads of a scalar-valued graph against central FD.

    `build(tensors) -> scalar Tensor` over tracked float64 tensors made from
    `arrays`. The comparison metric is max|a - n| / (max|n| + 1e-12) per input.
    """
    tensors = [T.Tensor(np.array(a, dtype=np.float64), tracked=True) for a in arrays]
    loss = build(tensors)
    loss.backward()

    def scalar(vals):
        out = build([T.Tensor(v) for v in vals])
        return float(out.data.reshape(-1)[0])

    for i, t in enumerate(tensors):
        num = numerical_gradient(scalar, arrays, i, h=h)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        err = np.abs(ana - num).max() / (np.abs(num).max() + 1e-12)
        assert err <= tol, f"input {i}: gradient mismatch rel err {err:.3e} > {tol}"
