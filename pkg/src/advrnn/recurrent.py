"""Stacked LSTM with a recurrent projection layer ("light" LSTM).

Each layer keeps an M-dim cell and emits an R-dim projection ``r_t = W_rh h_t``.
The projection is both the layer's output (input to the next layer) and the
recurrent input to its own gates at the next step. Gate order is i, f, o, g
and there are no peepholes.

All arrays are batched: inputs are (B, D), cells (B, M), projections (B, R).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import uniform_init
from .numerics import ParamStore, ShapeError, sigmoid


@dataclass(frozen=True)
class LightLstmConfig:
    input_dim: int
    cell_dim: int
    proj_dim: int
    num_layers: int = 3

    def __post_init__(self):
        if min(self.input_dim, self.cell_dim, self.proj_dim, self.num_layers) < 1:
            raise ValueError("all LSTM dimensions must be >= 1")
        if self.proj_dim > self.cell_dim:
            raise ValueError("proj_dim must not exceed cell_dim")

    def layer_input_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.proj_dim


@dataclass
class RecurrentState:
    cells: list[np.ndarray]
    outputs: list[np.ndarray]

    @property
    def top(self) -> np.ndarray:
        return self.outputs[-1]


class LightLstm:
    def __init__(self, store: ParamStore, prefix: str, config: LightLstmConfig,
                 rng=None):
        self.config = config
        self.prefix = prefix
        M, R = config.cell_dim, config.proj_dim
        self.layers = []
        for layer in range(config.num_layers):
            n_in = config.layer_input_dim(layer)
            p = f"{prefix}.l{layer}"
            if rng is None:
                wx, wm, wrh = np.zeros((4 * M, n_in)), np.zeros((4 * M, R)), np.zeros((R, M))
                b = np.zeros(4 * M)
            else:
                wx = uniform_init(rng, (4 * M, n_in), n_in)
                wm = uniform_init(rng, (4 * M, R), R)
                wrh = uniform_init(rng, (R, M), M)
                b = np.zeros(4 * M)
                b[M:2 * M] = 1.0
            names = ("W_x", "W_m", "b", "W_rh")
            for n, v in zip(names, (wx, wm, b, wrh)):
                store.add(f"{p}.{n}", v)
            self.layers.append(
                {n: store[f"{p}.{n}"] for n in names}
                | {"d" + n: store.grads[f"{p}.{n}"] for n in names}
            )

    def zero_state(self, batch: int) -> RecurrentState:
        M, R = self.config.cell_dim, self.config.proj_dim
        L = self.config.num_layers
        return RecurrentState([np.zeros((batch, M)) for _ in range(L)],
                              [np.zeros((batch, R)) for _ in range(L)])

    def step(self, x, prev: RecurrentState):
        """One time step through all layers; returns (state, cache)."""
        if x.shape[-1] != self.config.input_dim:
            raise ShapeError(f"expected input dim {self.config.input_dim}, got {x.shape[-1]}")
        if len(prev.cells) != self.config.num_layers:
            raise ShapeError("state has the wrong number of layers")
        M = self.config.cell_dim
        cells, outputs, caches = [], [], []
        inp = x
        for w, c_prev, r_prev in zip(self.layers, prev.cells, prev.outputs):
            if c_prev.shape[-1] != M or r_prev.shape[-1] != self.config.proj_dim:
                raise ShapeError("state dimensions do not match config")
            pre = inp @ w["W_x"].T + r_prev @ w["W_m"].T + w["b"]
            i = sigmoid(pre[:, :M])
            f = sigmoid(pre[:, M:2 * M])
            o = sigmoid(pre[:, 2 * M:3 * M])
            g = np.tanh(pre[:, 3 * M:])
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            r = h @ w["W_rh"].T
            caches.append((inp, r_prev, c_prev, i, f, o, g, tc, h))
            cells.append(c)
            outputs.append(r)
            inp = r
        return RecurrentState(cells, outputs), caches

    def step_backward(self, caches, d_out: list, d_cell: list):
        """Backprop one step.

        ``d_out[l]`` / ``d_cell[l]`` are the gradients w.r.t. this step's
        projection and cell for layer ``l``. Returns ``(dx, d_out_prev,
        d_cell_prev)`` for the previous step.
        """
        L = self.config.num_layers
        d_out_prev = [None] * L
        d_cell_prev = [None] * L
        carry = None  # gradient flowing down into the layer output from above
        for layer in reversed(range(L)):
            w = self.layers[layer]
            inp, r_prev, c_prev, i, f, o, g, tc, h = caches[layer]
            dr = d_out[layer] if carry is None else d_out[layer] + carry
            w["dW_rh"] += dr.T @ h
            dh = dr @ w["W_rh"]
            do = dh * tc
            dc = d_cell[layer] + dh * o * (1.0 - tc * tc)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            d_cell_prev[layer] = dc * f
            dpre = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g * g)],
                axis=1,
            )
            w["dW_x"] += dpre.T @ inp
            w["dW_m"] += dpre.T @ r_prev
            w["db"] += dpre.sum(axis=0)
            d_out_prev[layer] = dpre @ w["W_m"]
            carry = dpre @ w["W_x"]
        return carry, d_out_prev, d_cell_prev

    def forward_sequence(self, seq):
        """Run a (T, B, D) or list-of-(B, D) sequence from the zero state."""
        if len(seq) == 0:
            raise ValueError("empty sequence")
        state = self.zero_state(seq[0].shape[0])
        states, caches = [], []
        for x in seq:
            state, cache = self.step(x, state)
            states.append(state)
            caches.append(cache)
        return states, caches

    def bptt_backward(self, caches, d_top: list):
        """Backprop through time given gradients w.r.t. the top projection at
        every step. Accumulates weight grads; returns per-step input grads."""
        if len(caches) != len(d_top):
            raise ValueError(f"{len(caches)} retained steps but {len(d_top)} upstream gradients")
        L = self.config.num_layers
        B = d_top[0].shape[0]
        d_out = [np.zeros((B, self.config.proj_dim)) for _ in range(L)]
        d_cell = [np.zeros((B, self.config.cell_dim)) for _ in range(L)]
        dxs = [None] * len(caches)
        for t in reversed(range(len(caches))):
            d_out[-1] = d_out[-1] + d_top[t]
            dxs[t], d_out, d_cell = self.step_backward(caches[t], d_out, d_cell)
        return dxs


def light_lstm_step(x_t, prev: RecurrentState, lstm: LightLstm) -> RecurrentState:
    return lstm.step(np.atleast_2d(x_t), prev)[0]


def forward_sequence(seq, lstm: LightLstm) -> list[RecurrentState]:
    return lstm.forward_sequence([np.atleast_2d(x) for x in seq])[0]


def mult_count_vanilla(D: int, M: int) -> int:
    """Multiplications per step of a plain LSTM layer: 4(D+M)M."""
    if D < 1 or M < 1:
        raise ValueError("dimensions must be >= 1")
    return 4 * (D + M) * M


def mult_count_projected(D: int, M: int, R: int) -> int:
    """Multiplications per step with an R-dim recurrent projection: 4(D+R)M + RM."""
    if min(D, M, R) < 1 or R > M:
        raise ValueError("need D, M, R >= 1 and R <= M")
    return 4 * (D + R) * M + R * M
