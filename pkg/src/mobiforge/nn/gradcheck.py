"""Central finite-difference gradient checking in double precision."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradient(build_loss, x0: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and finite-difference grads.

    build_loss(param: Parameter) -> scalar Tensor, evaluated in float64.
    """
    with T.use_float64():
        p = T.Parameter(np.asarray(x0, dtype=np.float64))
        loss = build_loss(p)
        T.backward(loss)
        analytic = p.grad.copy()

        def f(x):
            q = T.Parameter(x)
            return build_loss(q).item()

        numeric = finite_difference_grad(f, np.asarray(x0, dtype=np.float64), h=h)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
