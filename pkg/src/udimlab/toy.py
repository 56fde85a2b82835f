"""Data-free quadratic objectives sharing the model interface of ``Mlp``.

Used as analytic test beds: the optimizers and analysis probes only touch
``theta``, ``loss``, ``grad`` and ``layer_slices``.
"""

from __future__ import annotations

import numpy as np


class Quadratic:
    """loss(theta) = 0.5 * theta^T A theta + b^T theta; the batch is ignored."""

    def __init__(self, A, theta, b=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.theta = np.array(theta, dtype=np.float64).reshape(-1)
        self.b = np.zeros_like(self.theta) if b is None else np.asarray(b, dtype=np.float64)
        if self.A.shape != (self.theta.size, self.theta.size):
            raise ValueError("A must be square and match theta")
        self.n_params = self.theta.size

    @property
    def classifier_slice(self) -> slice:
        return slice(0, self.n_params)

    def layer_slices(self) -> list[slice]:
        return [slice(0, self.n_params)]

    def loss(self, X=None, y=None) -> float:
        t = self.theta
        return float(0.5 * t @ self.A @ t + self.b @ t)

    def grad(self, X=None, y=None) -> np.ndarray:
        return 0.5 * (self.A + self.A.T) @ self.theta + self.b

    def loss_and_grad(self, X=None, y=None):
        return self.loss(), self.grad()

    def copy(self) -> "Quadratic":
        return Quadratic(self.A.copy(), self.theta.copy(), self.b.copy())
