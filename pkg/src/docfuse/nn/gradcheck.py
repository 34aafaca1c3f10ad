"""Central finite differences for validating hand-written backward passes."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_layer(layer, x: np.ndarray, training: bool = True, seed: int = 0,
                h: float = 1e-5, floor: float = 1e-6) -> dict[str, float]:
    """Compare a built layer's backward pass with finite differences.

    The scalar objective is ``sum(forward(x) * R)`` for a fixed random ``R``;
    dropout masks are made repeatable by reseeding before every forward.
    Returns the relative error for the input and for every parameter.
    """
    from .init import make_rng

    def run():
        return layer.forward(x, training=training, rng=make_rng(seed))

    proj = np.random.default_rng(seed + 1).normal(size=run().shape)

    def objective():
        return float(np.sum(run() * proj))

    run()
    dx = layer.backward(proj)
    errors = {"input": relative_error(dx, numerical_gradient(objective, x, h), floor)}
    analytic = {name: owner.grads[key].copy() for name, owner, key in layer.named_params()}
    for name, owner, key in layer.named_params():
        num = numerical_gradient(objective, owner.params[key], h)
        errors[name] = relative_error(analytic[name], num, floor)
    return errors
