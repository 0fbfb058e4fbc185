"""Two-layer tanh MLP with a hand-written backward pass."""

from __future__ import annotations

import numpy as np

from .numerics import ParamStore, ShapeError


def uniform_init(rng, shape, fan_in):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


class Mlp:
    """``y = W2 tanh(W1 x + b1) + b2``, weights stored as (out, in)."""

    def __init__(self, store: ParamStore, prefix: str, in_dim: int, hidden: int,
                 out_dim: int, rng=None):
        self.prefix = prefix
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        if rng is None:
            w1 = np.zeros((hidden, in_dim))
            w2 = np.zeros((out_dim, hidden))
        else:
            w1 = uniform_init(rng, (hidden, in_dim), in_dim)
            w2 = uniform_init(rng, (out_dim, hidden), hidden)
        self.W1 = store.add(f"{prefix}.W1", w1)
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden))
        self.W2 = store.add(f"{prefix}.W2", w2)
        self.b2 = store.add(f"{prefix}.b2", np.zeros(out_dim))
        self.dW1 = store.grads[f"{prefix}.W1"]
        self.db1 = store.grads[f"{prefix}.b1"]
        self.dW2 = store.grads[f"{prefix}.W2"]
        self.db2 = store.grads[f"{prefix}.b2"]

    def __call__(self, x):
        return self.forward(x)[0]

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.prefix}: expected input dim {self.in_dim}, got {x.shape[-1]}")
        h = np.tanh(x @ self.W1.T + self.b1)
        return h @ self.W2.T + self.b2, (x, h)

    def backward(self, dy, cache):
        x, h = cache
        self.dW2 += dy.T @ h
        self.db2 += dy.sum(axis=0)
        da = (dy @ self.W2) * (1.0 - h * h)
        self.dW1 += da.T @ x
        self.db1 += da.sum(axis=0)
        return da @ self.W1
