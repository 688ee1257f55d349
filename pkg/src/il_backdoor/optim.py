"""Adaptive-moment (Adam) optimizer over a flat parameter vector."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, n_params: int, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, dtype=np.float32):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params, dtype=dtype)
        self.v = np.zeros(n_params, dtype=dtype)
        # scratch buffers keep the hot path allocation-free
        self._s1 = np.empty(n_params, dtype=dtype)
        self._s2 = np.empty(n_params, dtype=dtype)

    def step(self, params: np.ndarray, grad: np.ndarray):
        """One in-place update. params and grad must match the state size."""
        if params.shape != self.m.shape:
            raise ValueError("optimizer state does not match parameter shape")
        self.t += 1
        s1, s2 = self._s1, self._s2
        # m += (1-b1) * (g - m);  v += (1-b2) * (g^2 - v)
        np.subtract(grad, self.m, out=s1)
        self.m += (1.0 - self.beta1) * s1
        np.multiply(grad, grad, out=s1)
        np.subtract(s1, self.v, out=s2)
        self.v += (1.0 - self.beta2) * s2
        # params -= lr * mhat / (sqrt(vhat) + eps)
        c1 = self.lr / (1.0 - self.beta1 ** self.t)
        c2 = 1.0 / (1.0 - self.beta2 ** self.t)
        np.multiply(self.v, c2, out=s1)
        np.sqrt(s1, out=s1)
        s1 += self.eps
        np.divide(self.m, s1, out=s2)
        s2 *= c1
        params -= s2

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"adam_m": self.m, "adam_v": self.v, "adam_t": np.array([self.t])}
