import numpy as np
import pytest

from ftfd.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference(func, arrays, step=1e-5):
    """Central finite differences of a scalar function w.r.t. each array.

    ``func`` must be a pure function of the arrays' current contents; the
    arrays are perturbed in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = func()
            flat[i] = orig - step
            fm = func()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(build_loss, arrays, tol=1e-4, step=1e-5):
    """Compare autodiff gradients of ``build_loss`` against central differences.

    ``build_loss(tensors)`` receives one requires_grad Tensor per array and
    returns a scalar Tensor.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    def run():
        ts = [Tensor(a) for a in arrays]
        return float(build_loss(ts).data)

    numeric = finite_difference(run, arrays, step=step)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst
