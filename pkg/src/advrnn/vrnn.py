"""Variational recurrent network over frame-feature sequences.

Per step t, with ``h`` the previous top-layer projection of the light LSTM::

    fx          = phi_x(x_t)
    q(z_t)      = N(enc(fx, h))             posterior
    p(z_t)      = N(prior(h))               prior
    z_t         = mu_q + sigma_q * eps
    p(x_t|z_t)  = N(dec(phi_z(z_t), h))     decoder
    state       = lstm([fx, phi_z(z_t)], state)

The per-sequence loss is the negative evidence lower bound
``sum_t KL(q || p) + NLL(x_t)`` with one reparameterized sample per step.
Sequences of different length are run together, zero padded; padded steps are
masked out of the loss and therefore receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Mlp
from .numerics import (
    GaussianParams,
    ParamStore,
    ShapeError,
    kl_diag_batch,
    nll_diag_batch,
    sigmoid,
    std_from_preact,
)
from .recurrent import LightLstm, LightLstmConfig, RecurrentState

PROBE = "probe"
GALLERY = "gallery"


@dataclass(frozen=True)
class VrnnConfig:
    frame_dim: int = 32
    feat_dim: int = 32
    hidden_dim: int = 32
    cell_dim: int = 64
    proj_dim: int = 16
    latent_dim: int = 16
    num_layers: int = 3

    def lstm_config(self) -> LightLstmConfig:
        return LightLstmConfig(2 * self.feat_dim, self.cell_dim, self.proj_dim, self.num_layers)


@dataclass
class FrameSequence:
    frames: np.ndarray
    label: int
    view: str = PROBE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a non-empty (T, D) array")
        if self.view not in (PROBE, GALLERY):
            raise ValueError(f"unknown view {self.view!r}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def truncated(self, length: int) -> "FrameSequence":
        return FrameSequence(self.frames[:max(1, length)], self.label, self.view)


@dataclass
class SequenceEmbedding:
    vector: np.ndarray
    view: str
    label: int


@dataclass
class StepTrace:
    posterior: list[GaussianParams] = field(default_factory=list)
    prior: list[GaussianParams] = field(default_factory=list)
    z: list[np.ndarray] = field(default_factory=list)
    decoder: list[GaussianParams] = field(default_factory=list)
    state: list[RecurrentState] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    nll: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.z)


def pad_sequences(seqs):
    """Stack sequences as (T_max, B, D) with zero padding, plus lengths and mask."""
    lengths = np.array([s.length if isinstance(s, FrameSequence) else len(s) for s in seqs])
    arrays = [s.frames if isinstance(s, FrameSequence) else np.asarray(s, dtype=np.float64)
              for s in seqs]
    dims = {a.shape[1] for a in arrays}
    if len(dims) != 1:
        raise ShapeError(f"inconsistent frame dims {sorted(dims)}")
    T = int(lengths.max())
    frames = np.zeros((T, len(arrays), dims.pop()))
    for b, a in enumerate(arrays):
        frames[:a.shape[0], b] = a
    mask = (np.arange(T)[:, None] < lengths[None, :]).astype(np.float64)
    return frames, lengths, mask


@dataclass
class VrnnForward:
    """Everything retained from a batched forward pass."""
    lengths: np.ndarray
    mask: np.ndarray
    qm: np.ndarray          # (T, B, Z) posterior means
    qs: np.ndarray          # (T, B, Z) posterior stds
    z: np.ndarray           # (T, B, Z) latents fed downstream
    kl: np.ndarray          # (T, B)
    nll: np.ndarray         # (T, B)
    sampled: bool
    steps: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def row_loss(self) -> np.ndarray:
        return ((self.kl + self.nll) * self.mask).sum(axis=0)

    def last(self, arr) -> np.ndarray:
        return arr[self.lengths - 1, np.arange(len(self.lengths))]


class Vrnn:
    def __init__(self, store: ParamStore, config: VrnnConfig, rng=None):
        c = config
        self.config = c
        self.store = store
        F, H, Z, R, D = c.feat_dim, c.hidden_dim, c.latent_dim, c.proj_dim, c.frame_dim
        self.phi_x = Mlp(store, "encoder.phi_x", D, H, F, rng)
        self.phi_z = Mlp(store, "encoder.phi_z", Z, H, F, rng)
        self.enc = Mlp(store, "encoder.enc", F + R, H, 2 * Z, rng)
        self.prior = Mlp(store, "encoder.prior", R, H, 2 * Z, rng)
        self.lstm = LightLstm(store, "encoder.lstm", c.lstm_config(), rng)
        self.dec = Mlp(store, "decoder.dec", F + R, H, 2 * D, rng)

    # -- single-step pieces --------------------------------------------------

    def _gauss(self, out, dim):
        return out[:, :dim], out[:, dim:], std_from_preact(out[:, dim:])

    def encode_step(self, x_t, h_prev) -> GaussianParams:
        x_t, h_prev = np.atleast_2d(x_t), np.atleast_2d(h_prev)
        m, _, s = self._gauss(self.enc(np.concatenate([self.phi_x(x_t), h_prev], 1)),
                              self.config.latent_dim)
        return GaussianParams(m.squeeze(0) if m.shape[0] == 1 else m,
                              s.squeeze(0) if s.shape[0] == 1 else s)

    def prior_step(self, h_prev) -> GaussianParams:
        m, _, s = self._gauss(self.prior(np.atleast_2d(h_prev)), self.config.latent_dim)
        return GaussianParams(m.squeeze(0) if m.shape[0] == 1 else m,
                              s.squeeze(0) if s.shape[0] == 1 else s)

    def decode_step(self, z_t, h_prev) -> GaussianParams:
        z_t, h_prev = np.atleast_2d(z_t), np.atleast_2d(h_prev)
        m, _, s = self._gauss(self.dec(np.concatenate([self.phi_z(z_t), h_prev], 1)),
                              self.config.frame_dim)
        return GaussianParams(m.squeeze(0) if m.shape[0] == 1 else m,
                              s.squeeze(0) if s.shape[0] == 1 else s)

    def recurrence_update(self, prev: RecurrentState, x_t, z_t) -> RecurrentState:
        x_t, z_t = np.atleast_2d(x_t), np.atleast_2d(z_t)
        inp = np.concatenate([self.phi_x(x_t), self.phi_z(z_t)], 1)
        return self.lstm.step(inp, prev)[0]

    # -- batched sequence pass ----------------------------------------------

    def run(self, frames, lengths, rng=None, keep_cache=True) -> VrnnForward:
        """Forward over padded (T, B, D) frames.

        With ``rng`` the latent at each step is a reparameterized draw (training);
        without it the posterior mean is propagated (deterministic inference).
        """
        c = self.config
        T, B, D = frames.shape
        if D != c.frame_dim:
            raise ShapeError(f"frame dim {D} != configured {c.frame_dim}")
        Z = c.latent_dim
        lengths = np.asarray(lengths)
        mask = (np.arange(T)[:, None] < lengths[None, :]).astype(np.float64)
        qm = np.empty((T, B, Z))
        qs = np.empty((T, B, Z))
        zs = np.empty((T, B, Z))
        kls = np.empty((T, B))
        nlls = np.empty((T, B))
        state = self.lstm.zero_state(B)
        fwd = VrnnForward(lengths, mask, qm, qs, zs, kls, nlls, rng is not None)
        for t in range(T):
            x = frames[t]
            h = state.top
            fx, c_fx = self.phi_x.forward(x)
            e_out, c_enc = self.enc.forward(np.concatenate([fx, h], 1))
            m, s_pre, s = self._gauss(e_out, Z)
            p_out, c_pri = self.prior.forward(h)
            pm, ps_pre, ps = self._gauss(p_out, Z)
            if rng is not None:
                eps = rng.standard_normal((B, Z))
                z = m + s * eps
            else:
                eps = None
                z = m
            fz, c_fz = self.phi_z.forward(z)
            d_out, c_dec = self.dec.forward(np.concatenate([fz, h], 1))
            xm, xs_pre, xs = self._gauss(d_out, D)
            state, c_lstm = self.lstm.step(np.concatenate([fx, fz], 1), state)
            kl, kl_g = kl_diag_batch(m, s, pm, ps)
            nll, nll_g = nll_diag_batch(x, xm, xs)
            qm[t], qs[t], zs[t], kls[t], nlls[t] = m, s, z, kl, nll
            if keep_cache:
                fwd.steps.append(dict(
                    c_fx=c_fx, c_enc=c_enc, c_pri=c_pri, c_fz=c_fz, c_dec=c_dec,
                    c_lstm=c_lstm, eps=eps, s_pre=s_pre, ps_pre=ps_pre, xs_pre=xs_pre,
                    kl_g=kl_g, nll_g=nll_g, pm=pm, ps=ps, xm=xm, xs=xs,
                ))
                fwd.states.append(state)
        return fwd

    def backward(self, fwd: VrnnForward, row_weight, d_z=None, d_mu=None,
                 kl_weight: float = 1.0):
        """Reverse pass accumulating into the parameter store.

        ``row_weight[b]`` scales sequence b's negative ELBO; ``d_z`` and ``d_mu``
        are optional (T, B, Z) upstream gradients w.r.t. the latents fed
        downstream and the posterior means. ``kl_weight`` rescales the KL part
        of the ELBO gradient (1 for the true objective).
        """
        if not fwd.steps:
            raise ValueError("forward pass was run without keep_cache")
        if len(fwd.steps) != fwd.mask.shape[0]:
            raise ValueError("retained steps do not match the forward mask")
        c = self.config
        F, Z, D = c.feat_dim, c.latent_dim, c.frame_dim
        T, B = fwd.mask.shape
        L = c.num_layers
        row_weight = np.asarray(row_weight, dtype=np.float64)
        d_out = [np.zeros((B, c.proj_dim)) for _ in range(L)]
        d_cell = [np.zeros((B, c.cell_dim)) for _ in range(L)]
        for t in reversed(range(T)):
            st = fwd.steps[t]
            d_in, d_out_prev, d_cell_prev = self.lstm.step_backward(st["c_lstm"], d_out, d_cell)
            dfx = d_in[:, :F]
            dfz = d_in[:, F:]
            coef = (row_weight * fwd.mask[t])[:, None]

            dxm, dxs = st["nll_g"]
            d_dec = np.concatenate([coef * dxm, coef * dxs * sigmoid(st["xs_pre"])], 1)
            g = self.dec.backward(d_dec, st["c_dec"])
            dfz = dfz + g[:, :F]
            dh = g[:, F:]

            dz = self.phi_z.backward(dfz, st["c_fz"])
            if d_z is not None:
                dz = dz + d_z[t]
            dqm_kl, dqs_kl, dpm_kl, dps_kl = (kl_weight * g for g in st["kl_g"])
            dqm = dz + coef * dqm_kl
            dqs = coef * dqs_kl
            if st["eps"] is not None:
                dqs = dqs + dz * st["eps"]
            if d_mu is not None:
                dqm = dqm + d_mu[t]
            g = self.enc.backward(np.concatenate([dqm, dqs * sigmoid(st["s_pre"])], 1), st["c_enc"])
            dfx = dfx + g[:, :F]
            dh = dh + g[:, F:]
            d_pri = np.concatenate([coef * dpm_kl, coef * dps_kl * sigmoid(st["ps_pre"])], 1)
            dh = dh + self.prior.backward(d_pri, st["c_pri"])
            self.phi_x.backward(dfx, st["c_fx"])

            d_out_prev[-1] = d_out_prev[-1] + dh
            d_out, d_cell = d_out_prev, d_cell_prev

    def posterior_means(self, seqs) -> tuple[np.ndarray, np.ndarray]:
        """(T_max, B, Z) posterior means on the deterministic path, and lengths."""
        frames, lengths, _ = pad_sequences(seqs)
        fwd = self.run(frames, lengths, rng=None, keep_cache=False)
        return fwd.qm, lengths


def elbo(seq: FrameSequence, model: Vrnn, rng) -> tuple[float, StepTrace]:
    """Negative ELBO of one sequence (the quantity training minimizes)."""
    frames, lengths, _ = pad_sequences([seq])
    fwd = model.run(frames, lengths, rng=rng, keep_cache=True)
    trace = StepTrace()
    for t, st in enumerate(fwd.steps):
        trace.posterior.append(GaussianParams(fwd.qm[t, 0], fwd.qs[t, 0]))
        trace.prior.append(GaussianParams(st["pm"][0], st["ps"][0]))
        trace.z.append(fwd.z[t, 0].copy())
        trace.decoder.append(GaussianParams(st["xm"][0], st["xs"][0]))
        trace.state.append(fwd.states[t])
        trace.kl.append(float(fwd.kl[t, 0]))
        trace.nll.append(float(fwd.nll[t, 0]))
    return float(fwd.row_loss()[0]), trace


def embed_sequence(seq: FrameSequence, model: Vrnn, mode: str = "mean",
                   rng=None) -> SequenceEmbedding:
    """Final-step posterior of a sequence.

    The recurrence always follows the posterior means, so ``mode="mean"``
    is deterministic and ignores ``rng``; ``mode="sample"`` adds one
    reparameterized draw at the last step.
    """
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    frames, lengths, _ = pad_sequences([seq])
    fwd = model.run(frames, lengths, rng=None, keep_cache=False)
    mu, sd = fwd.qm[-1, 0], fwd.qs[-1, 0]
    vec = mu.copy() if mode == "mean" else mu + sd * rng.standard_normal(mu.shape)
    return SequenceEmbedding(vec, seq.view, seq.label)
