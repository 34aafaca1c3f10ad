from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import DimensionError


class SgdMomentum:
    """SGD with momentum, ``v <- m*v - lr*g`` then ``w <- w + v``.

    Velocities are keyed by parameter name and created as zeros on first use.
    Parameters are updated in place, so layers keep their array identity.
    """

    def __init__(self, learning_rate: float = 0.01, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, w in params.items():
            g = grads[name]
            if g.shape != w.shape:
                raise DimensionError(f"{name}: grad shape {g.shape} != param shape {w.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(w)
            v *= self.momentum
            v -= self.learning_rate * g
            w += v
