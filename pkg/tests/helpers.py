"""Shared test oracles.

The finite-difference gradient checker perturbs raw parameter entries
one at a time, so it is independent of the backward implementation it
validates.
"""

import numpy as np

from fenrank.autodiff import backward

GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7
FD_STEP = 1e-5


def finite_difference_grads(loss_fn, params):
    """Central-difference gradients of ``loss_fn()`` w.r.t. each Parameter.

    ``loss_fn`` must rebuild the graph from the current parameter data on
    every call.
    """
    grads = {}
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = loss_fn().item()
            flat[i] = orig - FD_STEP
            down = loss_fn().item()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * FD_STEP)
        grads[p] = g
    return grads


def max_grad_error(analytic, numeric, params):
    """Largest |a - n| - (atol + rtol * max(|a|, |n|)) style violation,
    expressed as the worst ratio of |a - n| to its tolerance."""
    worst = 0.0
    for p in params:
        a = analytic.get(p, np.zeros_like(p.data))
        n = numeric[p]
        tol = GRAD_ATOL + GRAD_RTOL * np.maximum(np.abs(a), np.abs(n))
        ratio = np.abs(a - n) / tol
        if ratio.size:
            worst = max(worst, float(ratio.max()))
    return worst


def assert_grads_close(analytic, numeric, params):
    for p in params:
        a = analytic.get(p, np.zeros_like(p.data))
        n = numeric[p]
        ok = np.abs(a - n) <= GRAD_ATOL + GRAD_RTOL * np.maximum(np.abs(a), np.abs(n))
        assert ok.all(), f"gradient mismatch: max err {np.abs(a - n).max()}"


def check_op(loss_fn, params):
    """Assert backward() agrees with finite differences for ``loss_fn``."""
    numeric = finite_difference_grads(loss_fn, params)
    analytic = backward(loss_fn())
    assert_grads_close(analytic, numeric, params)
