import numpy as np
import pytest

from routelab.tensor import Tape

GRAD_RTOL = 1e-3
GRAD_ATOL = 1e-4
FD_STEP = 1e-3


def central_diff_grad(fn, tensor, h=FD_STEP):
    """Central-difference gradient of scalar-valued ``fn`` wrt ``tensor``.

    Independent of the tape: it only re-evaluates the forward computation,
    using the actually-representable float32 step for the denominator.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        xp = float(flat[i])
        fp = float(fn().data)
        flat[i] = orig - h
        xm = float(flat[i])
        fm = float(fn().data)
        flat[i] = orig
        grad[i] = (fp - fm) / (xp - xm)
    return grad.reshape(tensor.data.shape)


def assert_grads_match(fn, tensors, h=FD_STEP, rtol=GRAD_RTOL, atol=GRAD_ATOL):
    """Backward pass of ``fn`` vs central differences, per spec tolerance:
    |analytic - numeric| <= max(rtol * |numeric|, atol) elementwise."""
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        out = fn()
        tape.backward(out)
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = central_diff_grad(fn, t, h=h)
        err = np.abs(analytic.astype(np.float64) - numeric)
        tol = np.maximum(rtol * np.abs(numeric), atol)
        worst = (err - tol).max()
        assert np.all(err <= tol), (
            f"gradient mismatch: worst excess {worst:.3g}, "
            f"analytic {analytic.reshape(-1)[:4]}, numeric {numeric.reshape(-1)[:4]}")


@pytest.fixture
def rng():
    return np.random.default_rng(42)
