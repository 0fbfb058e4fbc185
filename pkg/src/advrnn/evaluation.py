"""Retrieval metrics, cross-view divergence and the ablation drivers.

Gallery order for a probe is descending score with ties broken by gallery
index (lower first). Every metric here uses that single ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import SIGMA_FLOOR, GaussianParams, ShapeError, gaussian_kl_diag
from .vrnn import SequenceEmbedding

DEFAULT_LENGTHS = tuple(2 ** k for k in range(8))


def _vec(z):
    return z.vector if isinstance(z, SequenceEmbedding) else np.asarray(z, dtype=np.float64)


def similarity(z_p, z_g, cosine: bool = False) -> float:
    a, b = _vec(z_p), _vec(z_g)
    if a.shape != b.shape:
        raise ShapeError(f"embedding dims differ: {a.shape} vs {b.shape}")
    s = float(np.dot(a, b))
    if cosine:
        s /= max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12)
    return s


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    probe_labels: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.probe_labels = np.asarray(self.probe_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        if self.scores.shape != (len(self.probe_labels), len(self.gallery_labels)):
            raise ShapeError("score matrix shape does not match label vectors")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite scores")


def score_matrix(probe_emb, gallery_emb, probe_labels, gallery_labels,
                 cosine: bool = False) -> ScoreMatrix:
    P = np.asarray(probe_emb, dtype=np.float64)
    G = np.asarray(gallery_emb, dtype=np.float64)
    if cosine:
        P = P / np.maximum(np.linalg.norm(P, axis=1, keepdims=True), 1e-12)
        G = G / np.maximum(np.linalg.norm(G, axis=1, keepdims=True), 1e-12)
    return ScoreMatrix(P @ G.T, probe_labels, gallery_labels)


def _gallery_order(scores: np.ndarray) -> np.ndarray:
    # lexsort sorts by the last key first; stable by index within equal scores
    n = scores.shape[1]
    return np.array([np.lexsort((np.arange(n), -row)) for row in scores])


def _relevance(sm: ScoreMatrix) -> np.ndarray:
    order = _gallery_order(sm.scores)
    rel = sm.gallery_labels[order] == sm.probe_labels[:, None]
    missing = ~rel.any(axis=1)
    if missing.any():
        raise ValueError(f"probe label(s) {sm.probe_labels[missing].tolist()} absent from gallery")
    return rel


def rank_gallery(sm: ScoreMatrix) -> np.ndarray:
    """1-based rank of each probe's first correct match."""
    return _relevance(sm).argmax(axis=1) + 1


def cmc(ranks, R: int) -> float:
    if R < 1:
        raise ValueError("rank must be >= 1")
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= R))


def cmc_curve(ranks, num_gallery: int) -> np.ndarray:
    ranks = np.asarray(ranks)
    return np.array([np.mean(ranks <= r) for r in range(1, num_gallery + 1)])


def mean_ap(sm: ScoreMatrix) -> float:
    """Mean over probes of average precision.

    The arithmetic is fixed so results are reproducible to the bit: each AP
    adds precision-at-hit in rank order, and the probe mean uses a correctly
    rounded sum.
    """
    aps = []
    for row in _relevance(sm):
        hits, total = 0, 0.0
        for pos in np.flatnonzero(row) + 1:
            hits += 1
            total += hits / int(pos)
        aps.append(total / hits)
    return math.fsum(aps) / len(aps)


@dataclass
class ViewDivergence:
    kl: float
    probe_fit: GaussianParams
    gallery_fit: GaussianParams


def fit_diag_gaussian(embs) -> GaussianParams:
    X = np.asarray([_vec(e) for e in embs], dtype=np.float64)
    return GaussianParams(X.mean(axis=0), np.maximum(X.std(axis=0, ddof=1), SIGMA_FLOOR))


def cross_view_kl(probe_embs, gallery_embs) -> ViewDivergence:
    """KL(probe fit || gallery fit) between diagonal Gaussians fitted per view."""
    if len(probe_embs) < 2 or len(gallery_embs) < 2:
        raise ValueError("need at least two embeddings per view")
    p = fit_diag_gaussian(probe_embs)
    g = fit_diag_gaussian(gallery_embs)
    return ViewDivergence(gaussian_kl_diag(p, g), p, g)


# --- model-level evaluation --------------------------------------------------------

def evaluate_embeddings(zp, zg, probe_labels, gallery_labels, cosine: bool = False) -> dict:
    sm = score_matrix(zp, zg, probe_labels, gallery_labels, cosine)
    ranks = rank_gallery(sm)
    out = {f"rank{r}": cmc(ranks, r) for r in (1, 5, 10, 20)}
    out["mAP"] = mean_ap(sm)
    out["kl"] = cross_view_kl(zp, zg).kl if min(len(zp), len(zg)) >= 2 else float("nan")
    out["cmc"] = cmc_curve(ranks, len(gallery_labels))
    return out


def evaluate_model(model, probes, galleries, probe_len: int | None = None,
                   gallery_len: int | None = None, cosine: bool = False) -> dict:
    """Embed probe/gallery sequences (optionally truncated) and score them."""
    if probe_len is not None:
        probes = [s.truncated(probe_len) for s in probes]
    if gallery_len is not None:
        galleries = [s.truncated(gallery_len) for s in galleries]
    zp = model.embed(probes)
    zg = model.embed(galleries)
    return evaluate_embeddings(zp, zg, [s.label for s in probes], [s.label for s in galleries], cosine)


def rank1(model, probes, galleries) -> float:
    zp, zg = model.embed(probes), model.embed(galleries)
    sm = score_matrix(zp, zg, [s.label for s in probes], [s.label for s in galleries])
    return cmc(rank_gallery(sm), 1)


@dataclass
class LengthGrid:
    lengths: tuple
    rank1: np.ndarray            # [probe length, gallery length]
    probe_effective: np.ndarray  # mean frames actually used per probe length
    gallery_effective: np.ndarray


def variable_length_ablation(model, probes, galleries, lengths=DEFAULT_LENGTHS) -> LengthGrid:
    """Rank-1 over every (probe prefix length, gallery prefix length) pair.

    Prefix embeddings come from a single causal pass; a sequence shorter than
    the requested length contributes its full length.
    """
    qp, lp = model.embed_prefixes(probes)
    qg, lg = model.embed_prefixes(galleries)
    pl = np.array([s.label for s in probes])
    gl = np.array([s.label for s in galleries])
    n = len(lengths)
    grid = np.zeros((n, n))
    for i, a in enumerate(lengths):
        ep = np.minimum(lp, a)
        zp = qp[ep - 1, np.arange(len(lp))]
        for j, b in enumerate(lengths):
            eg = np.minimum(lg, b)
            zg = qg[eg - 1, np.arange(len(lg))]
            grid[i, j] = cmc(rank_gallery(score_matrix(zp, zg, pl, gl)), 1)
    return LengthGrid(tuple(lengths), grid,
                      np.array([np.minimum(lp, a).mean() for a in lengths]),
                      np.array([np.minimum(lg, b).mean() for b in lengths]))


DEFAULT_CHECKPOINTS = (10, 20, 30, 40, 50)


@dataclass
class FusionRow:
    seed: int
    mode: str
    epoch: int
    rank1: float
    dataset_digest: str


@dataclass
class FusionAblation:
    rows: list
    loss_curves: dict  # (seed, mode) -> per-epoch training E

    def final_rank1(self, seed: int, mode: str) -> float:
        cands = [r for r in self.rows if r.seed == seed and r.mode == mode]
        return max(cands, key=lambda r: r.epoch).rank1


def fusion_ablation(dataset, config, seeds, checkpoints=DEFAULT_CHECKPOINTS,
                    heldout=None) -> FusionAblation:
    """Train early- and late-fusion models per seed and score rank-1 at checkpoints.

    Runs go the full length with early stopping disabled so every checkpoint
    epoch exists. Rank-1 is measured on ``heldout`` pairs when given, otherwise
    on the validation split.
    """
    from dataclasses import replace

    from .data import CrossViewDataset, dataset_digest, split_train_val
    from .training import make_trainer

    checkpoints = sorted(set(int(c) for c in checkpoints))
    if not checkpoints or checkpoints[0] < 1:
        raise ValueError("checkpoint epochs must be >= 1")
    if checkpoints[-1] > config.epochs:
        raise ValueError(f"checkpoint {checkpoints[-1]} beyond configured epochs {config.epochs}")
    if isinstance(heldout, CrossViewDataset):
        heldout = heldout.pairs()
    rows, curves = [], {}
    for seed in seeds:
        for mode in ("early", "late"):
            cfg = replace(config, seed=seed, fusion=mode, early_stop=False)
            digest = dataset_digest(dataset)
            trainer = make_trainer(dataset, cfg)
            pairs = heldout if heldout is not None else split_train_val(
                dataset, cfg.train_fraction, seed)[1]
            if not pairs:
                raise ValueError("no pairs to score: validation split is empty and no held-out set")
            probes = [p for p, _ in pairs]
            galleries = [g for _, g in pairs]
            for ep in checkpoints:
                trainer.run(until=ep)
                rows.append(FusionRow(seed, mode, ep, rank1(trainer.model, probes, galleries), digest))
            curves[(seed, mode)] = trainer.report.column("E_train")
    return FusionAblation(rows, curves)
