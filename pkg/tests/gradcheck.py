"""Central finite-difference gradient checking shared by the test suite.

The pattern: pick a fixed random projection R, define the scalar loss
L = sum(forward(x) * R), compute analytic gradients via backward(R), and
compare against symmetric differences (f(x+h) - f(x-h)) / 2h evaluated
coordinate by coordinate on the same mutable arrays.
"""

import numpy as np


def max_rel_err(analytic, numeric):
    """Largest elementwise relative error with a 1e-6 absolute floor."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    if a.shape != f.shape:
        raise AssertionError(f"gradient shape mismatch {a.shape} vs {f.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
    return float((np.abs(a - f) / denom).max())


def fd_grad(scalar_fn, array, h=1e-5):
    """Symmetric-difference gradient of scalar_fn with respect to array.

    scalar_fn must read the current contents of array on every call; the
    array is perturbed in place and restored.
    """
    flat = array.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = scalar_fn()
        flat[i] = orig - h
        lo = scalar_fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return out.reshape(array.shape)


def check_layer(layer, x, rng, h=1e-5, tol=1e-4):
    """FD-check dx and every parameter gradient of a layer on input x.

    Returns the worst relative error seen so failures can report it.
    """
    y = layer.forward(x)
    proj = rng.uniform(y.shape) * 2.0 - 1.0

    def scalar():
        return float((layer.forward(x) * proj).sum())

    params = list(layer.params())
    for _, p in params:
        p.grad = np.zeros_like(p.value)
    layer.forward(x)
    dx = layer.backward(proj)

    worst = max_rel_err(dx, fd_grad(scalar, x, h))
    assert worst <= tol, f"input gradient off by {worst:.3e}"
    for name, p in params:
        analytic = p.grad.copy()
        err = max_rel_err(analytic, fd_grad(scalar, p.value, h))
        assert err <= tol, f"gradient for {name} off by {err:.3e}"
        worst = max(worst, err)
    return worst
