"""Gaussian algebra, cross-entropy, parameter storage and gradient checking.

Everything is float64. Batched variants (``*_batch``) take row-major arrays
with one sample per row and return per-row values plus analytic gradients;
the scalar functions are the public, validated entry points.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

SIGMA_FLOOR = 1e-4
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def softplus(a):
    return np.logaddexp(0.0, a)


def std_from_preact(s):
    """Positive std from an unconstrained network output."""
    return softplus(s) + SIGMA_FLOOR


def preact_from_std(std):
    """Inverse of :func:`std_from_preact` (std must exceed the floor)."""
    y = np.asarray(std, dtype=np.float64) - SIGMA_FLOOR
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if mean.shape != std.shape:
            raise ShapeError(f"mean {mean.shape} and std {std.shape} differ")
        if np.any(std < SIGMA_FLOOR * (1 - 1e-12)):
            raise ValueError(f"std below floor {SIGMA_FLOOR}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


# --- KL between diagonal Gaussians -------------------------------------------

def kl_diag_batch(qm, qs, pm, ps):
    """Row-wise KL(q || p) and its gradients w.r.t. (qm, qs, pm, ps)."""
    diff = qm - pm
    inv_p2 = 1.0 / (ps * ps)
    quad = qs * qs + diff * diff
    kl = np.sum(np.log(ps) - np.log(qs) + 0.5 * quad * inv_p2 - 0.5, axis=-1)
    d_qm = diff * inv_p2
    d_qs = qs * inv_p2 - 1.0 / qs
    d_pm = -d_qm
    d_ps = 1.0 / ps - quad * inv_p2 / ps
    return kl, (d_qm, d_qs, d_pm, d_ps)


def gaussian_kl_diag(q: GaussianParams, p: GaussianParams) -> float:
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    kl, _ = kl_diag_batch(q.mean, q.std, p.mean, p.std)
    return max(float(kl), 0.0)


# --- Gaussian negative log-likelihood ----------------------------------------

def nll_diag_batch(x, m, s):
    """Row-wise -log N(x; m, diag(s^2)) and gradients w.r.t. (m, s)."""
    r = x - m
    inv_s2 = 1.0 / (s * s)
    nll = np.sum(HALF_LOG_2PI + np.log(s) + 0.5 * r * r * inv_s2, axis=-1)
    d_m = -r * inv_s2
    d_s = 1.0 / s - r * r * inv_s2 / s
    return nll, (d_m, d_s)


def gaussian_nll(x, g: GaussianParams) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != g.mean.shape:
        raise ShapeError(f"x has shape {x.shape}, Gaussian has {g.mean.shape}")
    nll, _ = nll_diag_batch(x, g.mean, g.std)
    return float(nll)


def reparameterize(g: GaussianParams, rng: np.random.Generator):
    """Draw ``mean + std * eps``; returns ``(z, eps)`` so callers can backprop.

    dz/dmean is the identity and dz/dstd is ``diag(eps)``.
    """
    eps = rng.standard_normal(g.mean.shape)
    return g.mean + g.std * eps, eps


# --- softmax cross-entropy ----------------------------------------------------

def cross_entropy_batch(logits, labels, weights=None):
    """Row-wise -log softmax(logits)[label] and d(sum w*loss)/dlogits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, width = logits.shape
    if np.any(labels < 0) or np.any(labels >= width):
        raise ValueError(f"label out of range [0, {width})")
    shift = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1))
    rows = np.arange(n)
    losses = lse - shift[rows, labels]
    probs = np.exp(shift - lse[:, None])
    probs[rows, labels] -= 1.0
    if weights is not None:
        probs *= np.asarray(weights, dtype=np.float64)[:, None]
    return losses, probs


def softmax_cross_entropy(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    if logits.shape[1] < 2:
        raise ValueError("need at least two classes")
    if not 0 <= int(label) < logits.shape[1]:
        raise ValueError(f"label {label} out of range [0, {logits.shape[1]})")
    losses, _ = cross_entropy_batch(logits, np.array([int(label)]))
    return max(float(losses[0]), 0.0)


# --- parameters ---------------------------------------------------------------

class ParamStore:
    """Named float64 parameters with matching gradient buffers.

    Names are dotted; the first component is the parameter group
    (``encoder``, ``decoder``, ``head_y``, ``head_d``).
    """

    def __init__(self):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.params)
        return [n for n in self.params if n.split(".", 1)[0] == group]

    def groups(self) -> list[str]:
        seen = []
        for n in self.params:
            g = n.split(".", 1)[0]
            if g not in seen:
                seen.append(g)
        return seen

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def copy_grads(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.grads.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        if set(values) != set(self.params):
            raise KeyError("parameter name sets differ")
        for k, v in values.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: {v.shape} != {self.params[k].shape}")
            self.params[k][...] = v


def param_count(params: ParamStore) -> int:
    return int(sum(v.size for v in params.params.values()))


# --- finite differences ---------------------------------------------------------

def finite_diff_errors(loss_fn: Callable[[ParamStore], float], params: ParamStore,
                       eps: float = 1e-5, names=None) -> dict[str, float]:
    """Per-parameter max relative error between analytic and central-difference
    gradients.

    ``loss_fn(params)`` must return the loss and leave the analytic gradient in
    ``params.grads`` (it is responsible for zeroing them first).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = loss_fn(params)
    if not np.isfinite(base):
        raise FloatingPointError("non-finite loss")
    analytic = params.copy_grads()
    errors = {}
    for name in names or params.names():
        w = params[name]
        flat = w.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn(params)
            flat[j] = orig - eps
            down = loss_fn(params)
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss perturbing {name}[{j}]")
            num = (up - down) / (2.0 * eps)
            ana = analytic[name].reshape(-1)[j]
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, rel)
        errors[name] = worst
    # leave the caller's grads as they were after the analytic pass
    for k, g in analytic.items():
        params.grads[k][...] = g
    return errors


def finite_diff_check(loss_fn, params: ParamStore, eps: float = 1e-5) -> float:
    errors = finite_diff_errors(loss_fn, params, eps)
    return max(errors.values(), default=0.0)
