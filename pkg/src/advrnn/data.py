"""Synthetic two-camera sequence data.

Each identity walks a latent trajectory

    u_t = base + sum_k amp_k * sin(freq_k * t + phase_k) * direction_k

and each camera observes ``A_v u_t + b_v + noise``. The two views share the
trajectory (same t indexing) but see it through different affine maps, which
is what makes the embedding distributions of the two views diverge.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .numerics import make_rng
from .serialization import Reader, Writer, read_framed, write_framed
from .vrnn import GALLERY, PROBE, FrameSequence

MAGIC = b"VADS"
VERSION = 1
NUM_MOTIONS = 3


@dataclass
class IdentitySpec:
    id: int
    base: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray
    amps: np.ndarray
    directions: np.ndarray  # (k, D)

    def trajectory(self, length: int) -> np.ndarray:
        t = np.arange(length, dtype=np.float64)[:, None]
        waves = self.amps * np.sin(self.freqs * t + self.phases)  # (T, k)
        return self.base + waves @ self.directions


@dataclass
class ViewTransform:
    matrix: np.ndarray
    offset: np.ndarray
    noise_std: float

    def apply(self, u: np.ndarray) -> np.ndarray:
        return u @ self.matrix.T + self.offset


@dataclass
class CrossViewDataset:
    identities: list[IdentitySpec]
    probe_transform: ViewTransform
    gallery_transform: ViewTransform
    probe: list[FrameSequence]
    gallery: list[FrameSequence]
    seed: int
    identity_offset: int = 0
    min_len: int = 8
    max_len: int = 32
    view_gap: float = 0.5
    noise_std: float = 0.5

    @property
    def num_identities(self) -> int:
        return len(self.identities)

    @property
    def dim(self) -> int:
        return self.identities[0].base.shape[0]

    def pairs(self, indices=None) -> list[tuple[FrameSequence, FrameSequence]]:
        idx = range(self.num_identities) if indices is None else indices
        return [(self.probe[i], self.gallery[i]) for i in idx]

    def summary(self) -> dict:
        lengths = [s.length for s in self.probe + self.gallery]
        return {"identities": self.num_identities, "dim": self.dim,
                "min_len": min(lengths), "max_len": max(lengths),
                "mean_len": float(np.mean(lengths))}


def _view_transform(seed: int, view: int, dim: int, gap: float, noise: float) -> ViewTransform:
    rng = make_rng([seed, 0, view])
    while True:
        A = np.eye(dim) + gap * rng.standard_normal((dim, dim)) / np.sqrt(dim)
        if np.linalg.cond(A) <= 100.0:
            break
    b = gap * rng.standard_normal(dim)
    return ViewTransform(A, b, float(noise))


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _identity(seed: int, ident: int, dim: int, k: int) -> IdentitySpec:
    rng = make_rng([seed, 1, ident])
    return IdentitySpec(
        id=ident,
        base=rng.standard_normal(dim),
        freqs=rng.uniform(0.2, 1.0, k),
        phases=rng.uniform(0.0, 2 * np.pi, k),
        amps=rng.uniform(0.5, 1.5, k),
        directions=_unit_rows(rng.standard_normal((k, dim))),
    )


def _observe(spec, view_tf, seed, view, length):
    rng = make_rng([seed, 2, spec.id, view])
    frames = view_tf.apply(spec.trajectory(length))
    if view_tf.noise_std > 0:
        frames = frames + view_tf.noise_std * rng.standard_normal(frames.shape)
    return frames


def generate_dataset(num_identities: int = 32, seq_len=(8, 32), dim: int = 32, seed: int = 0,
                     view_gap: float = 0.5, noise_std: float = 0.5,
                     identity_offset: int = 0) -> CrossViewDataset:
    """Generate one probe and one gallery sequence per identity.

    View transforms depend on ``seed`` only, so datasets with the same seed and
    different ``identity_offset`` are disjoint identities seen by the same
    cameras (useful for held-out test sets).
    """
    lo, hi = seq_len
    if num_identities < 2:
        raise ValueError("need at least two identities")
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range {seq_len}")
    if dim < 1 or view_gap < 0 or noise_std < 0:
        raise ValueError("dim must be >= 1, view_gap and noise_std >= 0")
    transforms = [_view_transform(seed, v, dim, view_gap, noise_std) for v in (0, 1)]
    identities, probe, gallery = [], [], []
    for label in range(num_identities):
        spec = _identity(seed, identity_offset + label, dim, NUM_MOTIONS)
        identities.append(spec)
        for view, tf, out, tag in ((0, transforms[0], probe, PROBE), (1, transforms[1], gallery, GALLERY)):
            length = int(make_rng([seed, 3, spec.id, view]).integers(lo, hi + 1))
            out.append(FrameSequence(_observe(spec, tf, seed, view, length), label, tag))
    return CrossViewDataset(identities, transforms[0], transforms[1], probe, gallery, seed,
                            identity_offset, lo, hi, float(view_gap), float(noise_std))


def split_train_val(dataset: CrossViewDataset, fraction: float = 0.9, seed: int = 0):
    """Disjoint identity split: ceil(fraction * L) training pairs, the rest validation."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = dataset.num_identities
    n_train = math.ceil(round(fraction * n, 9))
    order = make_rng([seed, 4]).permutation(n)
    train_idx = sorted(order[:n_train].tolist())
    val_idx = sorted(order[n_train:].tolist())
    return dataset.pairs(train_idx), dataset.pairs(val_idx)


# --- serialization --------------------------------------------------------------

def dataset_bytes(ds: CrossViewDataset) -> bytes:
    w = Writer()
    L, D, k = ds.num_identities, ds.dim, ds.identities[0].freqs.shape[0]
    w.pack("IIIqqIIdd", L, D, k, ds.seed, ds.identity_offset, ds.min_len, ds.max_len,
           ds.view_gap, ds.noise_std)
    for tf in (ds.probe_transform, ds.gallery_transform):
        w.floats(tf.matrix)
        w.floats(tf.offset)
        w.pack("d", tf.noise_std)
    for spec in ds.identities:
        w.pack("q", spec.id)
        for arr in (spec.base, spec.freqs, spec.phases, spec.amps, spec.directions):
            w.floats(arr)
    for p, g in zip(ds.probe, ds.gallery):
        for seq in (p, g):
            w.pack("I", seq.length)
            w.floats(seq.frames)
    return w.getvalue()


def dataset_digest(ds: CrossViewDataset) -> str:
    return hashlib.sha256(dataset_bytes(ds)).hexdigest()


def save_dataset(ds: CrossViewDataset, path):
    write_framed(path, MAGIC, VERSION, dataset_bytes(ds))


def load_dataset(path) -> CrossViewDataset:
    r = Reader(read_framed(path, MAGIC, VERSION))
    L, D, k, seed, offset, lo, hi, gap, noise = r.unpack("IIIqqIIdd")
    transforms = []
    for _ in range(2):
        A = r.floats((D, D))
        b = r.floats(D)
        transforms.append(ViewTransform(A, b, r.unpack("d")))
    identities = []
    for _ in range(L):
        ident = r.unpack("q")
        identities.append(IdentitySpec(ident, r.floats(D), r.floats(k), r.floats(k), r.floats(k),
                                       r.floats((k, D))))
    probe, gallery = [], []
    for label in range(L):
        for out, tag in ((probe, PROBE), (gallery, GALLERY)):
            T = r.unpack("I")
            out.append(FrameSequence(r.floats((T, D)), label, tag))
    return CrossViewDataset(identities, transforms[0], transforms[1], probe, gallery, seed,
                            offset, lo, hi, gap, noise)
