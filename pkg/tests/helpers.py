"""Shared test utilities: the finite-difference gradient oracle."""

import numpy as np


def finite_difference(build_scalar, tensors, h=1e-5):
    """Central-difference gradient of build_scalar() wrt each tensor.

    build_scalar must rebuild the forward graph from the tensors' current
    values on every call and return a plain float.
    """
    grads = []
    for t in tensors:
        flat = t.values.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = build_scalar()
            flat[i] = orig - h
            fm = build_scalar()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.values.shape))
    return grads


def max_rel_err(analytic, numeric):
    """max over elements of |a - n| / max(|a| + |n|, 1e-4).

    Gradients of order one compare relatively; entries below the floor
    compare absolutely at the floor's scale, which keeps finite-difference
    round-off from producing false alarms.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-4)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_grads(build_scalar_tensor, tensors, h=1e-5, tol=1e-4):
    """Run backward once, compare against the numeric oracle; returns the
    observed worst relative error (asserting it is under tol)."""
    for t in tensors:
        t.zero_grad()
    out = build_scalar_tensor()
    out.backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = finite_difference(lambda: float(build_scalar_tensor().values), tensors, h=h)
    err = max_rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err
