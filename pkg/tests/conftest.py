import numpy as np
import pytest

from pocr.numcore import Tensor


def finite_difference(func, tensors, step=1e-6):
    """Central finite differences of a scalar-valued func wrt each tensor.

    Independent of the autodiff path: perturbs raw numpy buffers and calls
    func fresh each time.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(func().data)
            flat[i] = orig - step
            down = float(func().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def check_gradients(func, tensors, step=1e-6, rtol=1e-5):
    """Assert analytic gradients match central differences."""
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    loss = func()
    loss.backward()
    numeric = finite_difference(func, tensors, step=step)
    for t, num in zip(tensors, numeric):
        assert t.grad is not None, "no gradient reached a parameter"
        denom = max(np.abs(num).max(), np.abs(t.grad).max(), 1e-8)
        rel = np.abs(t.grad - num).max() / denom
        assert rel < rtol, f"gradient mismatch: rel err {rel:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rand_tensor(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
