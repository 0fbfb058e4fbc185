"""Classifier heads, the cross-view regulariser and the saddle-point updates.

The objective over a batch of P identity pairs is::

    L_V = (1/P) sum_pairs  mean over the pair's two sequences of NLB(X)/T
    L_y = (1/P) sum_i CE(G_y(mu_probe_i), i)
    L_d = (1/P) sum_i CE(G_d(mu_gallery_i), i)
    L_R = -(1/P) sum_i [CE(G_d(mu_probe_i), i) + CE(G_y(mu_gallery_i), i)]
    E   = L_V + L_y + L_d + lambda * L_R

where NLB is the negative ELBO and mu the final-step posterior mean, the same
vector used for matching. The cross-applied terms in L_R use that final mean
("late" fusion) or the mean at every step, averaged over steps ("early").

In the backward pass the regulariser is routed through a gradient reversal
node, so every parameter group receives ``-lambda * dL_R`` instead of
``+lambda * dL_R``; combined with plain descent this is exactly the update::

    theta_e -= eta * (dL_V + dL_C - lambda dL_R)
    theta_g -= eta * dL_V
    theta_y -= eta * (dL_y - lambda dL_R)
    theta_d -= eta * (dL_d - lambda dL_R)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import Mlp
from .numerics import ParamStore, ShapeError, cross_entropy_batch, make_rng, softmax_cross_entropy
from .vrnn import GALLERY, PROBE, FrameSequence, SequenceEmbedding, Vrnn, VrnnConfig, pad_sequences

EARLY = "early"
LATE = "late"
GROUPS = ("encoder", "decoder", "head_y", "head_d")


@dataclass(frozen=True)
class ModelConfig:
    vrnn: VrnnConfig = VrnnConfig()
    num_identities: int = 32
    head_hidden: int = 32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vrnn"] = VrnnConfig(**d["vrnn"])
        return cls(**d)


@dataclass(frozen=True)
class AdversarialConfig:
    lam: float = 0.6
    fusion: str = EARLY
    lr: float = 1e-3
    optimizer: str = "adam"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.fusion not in (EARLY, LATE):
            raise ValueError(f"fusion must be {EARLY!r} or {LATE!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LossBreakdown:
    L_V: float
    L_y: float
    L_d: float
    L_C: float
    L_R: float
    E: float

    def as_row(self) -> list[float]:
        return [self.L_V, self.L_y, self.L_d, self.L_C, self.L_R, self.E]


class ClassifierHead(Mlp):
    def __init__(self, store, role: str, in_dim: int, hidden: int, n_classes: int, rng=None):
        if role not in ("head_y", "head_d"):
            raise ValueError(f"unknown head role {role!r}")
        self.role = role
        super().__init__(store, role, in_dim, hidden, n_classes, rng)


class GradientReversal:
    """Identity forward; multiplies the upstream gradient by ``-lam`` backward."""

    def __init__(self, lam: float):
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        self.lam = lam

    def forward(self, x):
        return x

    def backward(self, g):
        return -self.lam * np.asarray(g, dtype=np.float64)


def gradient_reversal(x, lam: float):
    return GradientReversal(lam).forward(x)


def classify(emb, head: ClassifierHead) -> np.ndarray:
    vec = emb.vector if isinstance(emb, SequenceEmbedding) else np.asarray(emb, dtype=np.float64)
    if vec.shape[-1] != head.in_dim:
        raise ShapeError(f"embedding dim {vec.shape[-1]} != head input {head.in_dim}")
    return head(np.atleast_2d(vec))[0]


def classification_losses(z_probe, z_gallery, label: int, head_y, head_d) -> tuple[float, float]:
    """(L_y, L_d): each view's own head on its own embedding."""
    return (softmax_cross_entropy(classify(z_probe, head_y), label),
            softmax_cross_entropy(classify(z_gallery, head_d), label))


def verification_regularizer(z_probe, z_gallery, label: int, head_y, head_d) -> float:
    """Cross-applied loss: gallery head on the probe, probe head on the gallery."""
    return (softmax_cross_entropy(classify(z_probe, head_d), label)
            + softmax_cross_entropy(classify(z_gallery, head_y), label))


@dataclass
class ObjectiveCache:
    rows: list
    fwd: object
    probe_idx: np.ndarray
    gallery_idx: np.ndarray
    labels: np.ndarray
    n_pairs: float
    own: dict
    cross: dict
    breakdown: LossBreakdown


class AdversarialModel:
    """VRNN encoder/decoder plus the probe (G_y) and gallery (G_d) heads."""

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        self.config = config
        self.store = ParamStore()
        rng = None if seed is None else make_rng([seed, 17])
        self.vrnn = Vrnn(self.store, config.vrnn, rng)
        Z = config.vrnn.latent_dim
        self.head_y = ClassifierHead(self.store, "head_y", Z, config.head_hidden,
                                     config.num_identities, rng)
        self.head_d = ClassifierHead(self.store, "head_d", Z, config.head_hidden,
                                     config.num_identities, rng)

    def head_for(self, view: str, cross: bool) -> ClassifierHead:
        own = self.head_y if view == PROBE else self.head_d
        other = self.head_d if view == PROBE else self.head_y
        return other if cross else own

    # -- objective -----------------------------------------------------------

    def forward(self, rows: list[FrameSequence], lam: float, fusion: str, rng,
                keep_cache: bool = True) -> ObjectiveCache:
        if not rows:
            raise ValueError("empty batch")
        if fusion not in (EARLY, LATE):
            raise ValueError(f"unknown fusion mode {fusion!r}")
        n_cls = self.config.num_identities
        labels = np.array([r.label for r in rows])
        if np.any(labels < 0) or np.any(labels >= n_cls):
            raise ValueError(f"label out of range [0, {n_cls})")
        views = np.array([r.view for r in rows])
        probe_idx = np.flatnonzero(views == PROBE)
        gallery_idx = np.flatnonzero(views == GALLERY)
        P = len(rows) / 2.0

        frames, lengths, _ = pad_sequences(rows)
        fwd = self.vrnn.run(frames, lengths, rng=rng, keep_cache=keep_cache)

        z_last = fwd.last(fwd.qm)
        L_V = float(np.sum(0.5 * fwd.row_loss() / lengths) / P)

        own, cross = {}, {}
        sums = {}
        for view, idx in ((PROBE, probe_idx), (GALLERY, gallery_idx)):
            if len(idx) == 0:
                sums[view] = (0.0, 0.0)
                continue
            head = self.head_for(view, cross=False)
            logits, hc = head.forward(z_last[idx])
            ce, _ = cross_entropy_batch(logits, labels[idx])
            own[view] = (idx, logits, hc)
            own_sum = float(ce.sum())

            # cross-applied head on posterior means
            xhead = self.head_for(view, cross=True)
            if fusion == EARLY:
                t_idx, b_idx = np.nonzero(fwd.mask[:, idx])
                b_rows = idx[b_idx]
                weights = 1.0 / lengths[b_rows]
            else:
                b_rows = idx
                t_idx = lengths[idx] - 1
                weights = np.ones(len(idx))
            xlogits, xhc = xhead.forward(fwd.qm[t_idx, b_rows])
            xce, _ = cross_entropy_batch(xlogits, labels[b_rows])
            cross[view] = (t_idx, b_rows, weights, xlogits, xhc)
            sums[view] = (own_sum, float(np.dot(weights, xce)))

        L_y = sums[PROBE][0] / P
        L_d = sums[GALLERY][0] / P
        L_R = -(sums[PROBE][1] + sums[GALLERY][1]) / P
        L_C = L_y + L_d
        E = L_V + L_C + lam * L_R
        bd = LossBreakdown(L_V, L_y, L_d, L_C, L_R, E)
        return ObjectiveCache(rows, fwd, probe_idx, gallery_idx, labels, P, own, cross, bd)

    def backward(self, cache: ObjectiveCache, v: float = 1.0, y: float = 1.0, d: float = 1.0,
                 r: float = 0.0):
        """Accumulate gradients for ``v*L_V + y*L_y + d*L_d + r*L_R``."""
        fwd = cache.fwd
        T, B = fwd.mask.shape
        Z = self.config.vrnn.latent_dim
        P = cache.n_pairs
        labels = cache.labels
        d_mu = np.zeros((T, B, Z))
        last_t = fwd.lengths - 1
        coef_own = {PROBE: y, GALLERY: d}
        for view, (idx, logits, hc) in cache.own.items():
            if coef_own[view] == 0.0:
                continue
            head = self.head_for(view, cross=False)
            _, dlog = cross_entropy_batch(logits, labels[idx], np.full(len(idx), coef_own[view] / P))
            d_mu[last_t[idx], idx] += head.backward(dlog, hc)

        if r != 0.0:
            for view, (t_idx, b_rows, weights, xlogits, xhc) in cache.cross.items():
                xhead = self.head_for(view, cross=True)
                _, dlog = cross_entropy_batch(xlogits, labels[b_rows], -r / P * weights)
                d_mu[t_idx, b_rows] += xhead.backward(dlog, xhc)

        row_weight = v * 0.5 / (P * fwd.lengths)
        self.vrnn.backward(fwd, row_weight, d_mu=d_mu)

    def loss_and_grad(self, rows, adv: AdversarialConfig, rng, reverse: bool = True) -> LossBreakdown:
        """Zero grads, evaluate E and backprop.

        With ``reverse`` the regulariser passes the gradient reversal node
        (training); without it the result is the plain gradient of E.
        """
        self.store.zero_grad()
        cache = self.forward(rows, adv.lam, adv.fusion, rng)
        if adv.lam == 0.0:
            r = 0.0
        elif reverse:
            r = float(GradientReversal(adv.lam).backward(1.0))
        else:
            r = adv.lam
        self.backward(cache, r=r)
        return cache.breakdown

    # -- inference -----------------------------------------------------------

    def embed(self, seqs) -> np.ndarray:
        """(B, Z) final-step posterior means on the deterministic path."""
        qm, lengths = self.vrnn.posterior_means(seqs)
        return qm[lengths - 1, np.arange(len(lengths))]

    def embed_prefixes(self, seqs) -> tuple[np.ndarray, np.ndarray]:
        """Posterior means after every prefix: (T_max, B, Z) and lengths."""
        return self.vrnn.posterior_means(seqs)


def total_objective(rows, model: AdversarialModel, adv: AdversarialConfig, rng) -> LossBreakdown:
    return model.loss_and_grad(rows, adv, rng, reverse=True)


# --- optimisation ------------------------------------------------------------

class Optimizer:
    """Plain descent (``sgd``) or Adam(0.9, 0.999, 1e-8) over a ParamStore."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, store: ParamStore, kind: str = "adam", lr: float = 1e-3):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.store = store
        self.kind = kind
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}

    def step(self):
        for name, g in self.store.grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        self.t += 1
        if self.kind == "sgd":
            for name, p in self.store.params.items():
                p -= self.lr * self.store.grads[name]
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.store.params.items():
            g = self.store.grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def update_step(store: ParamStore, optimizer: Optimizer):
    optimizer.step()
