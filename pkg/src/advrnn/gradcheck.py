"""Finite-difference checks of every hand-written backward pass at toy sizes.

Each check builds a small model, overwrites its weights with N(0, 0.5^2)
draws, and compares analytic against central-difference gradients. The
default initialisation leaves some paths with gradients around 1e-8, where
central differences are dominated by roundoff; the larger weights keep every
path measurable. ``eps = 1e-4`` balances truncation and roundoff on losses of
order 100.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adversarial import EARLY, LATE, AdversarialConfig, AdversarialModel, ModelConfig
from .numerics import ParamStore, finite_diff_errors, make_rng
from .recurrent import LightLstm, LightLstmConfig
from .vrnn import GALLERY, PROBE, FrameSequence, Vrnn, VrnnConfig, pad_sequences

TOLERANCE = 1e-4
EPS = 1e-4
WEIGHT_SCALE = 0.5

TOY_VRNN = VrnnConfig(frame_dim=8, feat_dim=8, hidden_dim=8, cell_dim=8, proj_dim=4,
                      latent_dim=4, num_layers=2)
TOY_MODEL = ModelConfig(TOY_VRNN, num_identities=4, head_hidden=8)


@dataclass
class CheckResult:
    name: str
    group_errors: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.group_errors.values(), default=0.0)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_error < tol


def _scramble(store: ParamStore, seed: int):
    rng = make_rng([seed, 99])
    for v in store.params.values():
        v[...] = rng.normal(0.0, WEIGHT_SCALE, v.shape)


def _by_group(errors: dict) -> dict:
    out = {}
    for name, err in errors.items():
        group = name.rsplit(".", 1)[0]
        out[group] = max(out.get(group, 0.0), err)
    return out


def _corrupting(loss_fn, corrupt):
    """Wrap ``loss_fn`` so the analytic gradient of params matching ``corrupt``
    has its sign flipped (negative-control hook)."""
    if corrupt is None:
        return loss_fn

    def wrapped(store):
        val = loss_fn(store)
        for k in store.names():
            if k.startswith(corrupt):
                store.grads[k] *= -1.0
        return val
    return wrapped


def toy_rows(seed: int, n_pairs: int = 4, dim: int = 8) -> list[FrameSequence]:
    rng = make_rng([seed, 7])
    rows = []
    for i in range(n_pairs):
        rows.append(FrameSequence(rng.normal(size=(3 + i % 2, dim)), i % 4, PROBE))
        rows.append(FrameSequence(rng.normal(size=(4 - i % 2, dim)), i % 4, GALLERY))
    return rows


def check_lstm_step(seed: int = 0, eps: float = EPS, corrupt=None) -> CheckResult:
    """One light-LSTM step from a random previous state, random linear readout."""
    cfg = LightLstmConfig(input_dim=8, cell_dim=8, proj_dim=4, num_layers=2)
    store = ParamStore()
    lstm = LightLstm(store, "lstm", cfg, make_rng([seed, 1]))
    _scramble(store, seed)
    rng = make_rng([seed, 2])
    B = 3
    x = rng.normal(size=(B, cfg.input_dim))
    prev = lstm.zero_state(B)
    for l in range(cfg.num_layers):
        prev.cells[l][...] = rng.normal(size=prev.cells[l].shape)
        prev.outputs[l][...] = rng.normal(size=prev.outputs[l].shape)
    w_out = [rng.normal(size=o.shape) for o in prev.outputs]
    w_cell = [rng.normal(size=c.shape) for c in prev.cells]

    def loss(s):
        s.zero_grad()
        state, caches = lstm.step(x, prev)
        lstm.step_backward(caches, [w.copy() for w in w_out], [w.copy() for w in w_cell])
        return float(sum(np.sum(w * o) for w, o in zip(w_out, state.outputs))
                     + sum(np.sum(w * c) for w, c in zip(w_cell, state.cells)))

    errs = finite_diff_errors(_corrupting(loss, corrupt), store, eps)
    return CheckResult("lstm_step", _by_group(errs))


def check_elbo(seed: int = 0, T: int = 5, eps: float = EPS, corrupt=None) -> CheckResult:
    """Negative ELBO of one length-``T`` sequence under a fixed noise draw."""
    store = ParamStore()
    vrnn = Vrnn(store, TOY_VRNN, make_rng([seed, 1]))
    _scramble(store, seed)
    seq = FrameSequence(make_rng([seed, 3]).normal(size=(T, TOY_VRNN.frame_dim)), 0, PROBE)
    frames, lengths, _ = pad_sequences([seq])

    def loss(s):
        s.zero_grad()
        fwd = vrnn.run(frames, lengths, rng=make_rng([seed, 5]))
        vrnn.backward(fwd, np.ones(1))
        return float(fwd.row_loss()[0])

    errs = finite_diff_errors(_corrupting(loss, corrupt), store, eps)
    return CheckResult(f"elbo_T{T}", _by_group(errs))


def check_objective(seed: int = 0, lam: float = 0.6, fusion: str = EARLY, eps: float = EPS,
                    reversed_path: bool = False, corrupt=None) -> CheckResult:
    """Full objective E on a toy batch.

    With ``reversed_path`` the analytic gradient is the one training applies
    (reversal in effect), and the finite-difference target is the objective
    whose plain gradient that is: ``L_V + L_C - lam * L_R``.
    """
    model = AdversarialModel(TOY_MODEL, seed=seed)
    _scramble(model.store, seed)
    rows = toy_rows(seed)
    adv = AdversarialConfig(lam=lam, fusion=fusion)

    def loss(s):
        bd = model.loss_and_grad(rows, adv, make_rng([seed, 5]), reverse=reversed_path)
        return bd.E - 2.0 * lam * bd.L_R if reversed_path else bd.E

    errs = finite_diff_errors(_corrupting(loss, corrupt), model.store, eps)
    tag = "reversed" if reversed_path else "plain"
    return CheckResult(f"objective_{fusion}_{tag}", _by_group(errs))


def run_suite(seed: int = 0, eps: float = EPS, corrupt=None, full: bool = True) -> list[CheckResult]:
    """The three required checks, plus the reversed-path and late-fusion
    variants when ``full``."""
    out = [check_lstm_step(seed, eps, corrupt), check_elbo(seed, 5, eps, corrupt),
           check_objective(seed, 0.6, EARLY, eps, False, corrupt)]
    if full:
        out.append(check_objective(seed, 0.6, EARLY, eps, True, corrupt))
        out.append(check_objective(seed, 0.6, LATE, eps, False, corrupt))
    return out
