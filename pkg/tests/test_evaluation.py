import math

import numpy as np
import pytest
from conftest import TOY_MODEL, scramble
from hypothesis import given, settings
from hypothesis import strategies as st

from advrnn.adversarial import AdversarialModel
from advrnn.data import generate_dataset
from advrnn.evaluation import (
    DEFAULT_LENGTHS,
    ScoreMatrix,
    cmc,
    cmc_curve,
    cross_view_kl,
    evaluate_model,
    fusion_ablation,
    mean_ap,
    rank_gallery,
    score_matrix,
    similarity,
    variable_length_ablation,
)
from advrnn.numerics import ShapeError, make_rng
from advrnn.training import TrainConfig


# --- brute-force oracles ----------------------------------------------------------

def oracle_order(row):
    return sorted(range(len(row)), key=lambda j: (-row[j], j))


def oracle_rank(row, glabels, label):
    """1 + strictly greater scores + equal scores at a lower gallery index, for the
    best-placed relevant item (no sorting involved)."""
    best = None
    for j, gl in enumerate(glabels):
        if gl != label:
            continue
        r = 1 + sum(1 for k, s in enumerate(row) if s > row[j] or (s == row[j] and k < j))
        best = r if best is None else min(best, r)
    return best


def oracle_ap(row, glabels, label):
    order = oracle_order(row)
    hits, total = 0, 0.0
    for pos, j in enumerate(order, start=1):
        if glabels[j] == label:
            hits += 1
            total += hits / pos
    return total / hits


matrices = st.integers(1, 6).flatmap(lambda P: st.integers(1, 8).flatmap(lambda G: st.tuples(
    st.lists(st.lists(st.integers(-2, 2), min_size=G, max_size=G), min_size=P, max_size=P),
    st.lists(st.integers(0, 2), min_size=G, max_size=G),
    st.lists(st.integers(0, 7), min_size=P, max_size=P))))


def build(case):
    """Small-integer scores give frequent ties; probe labels are drawn from the gallery."""
    scores, glabels, picks = case
    G = len(glabels)
    plabels = [glabels[p % G] for p in picks]
    return ScoreMatrix(np.array(scores, dtype=float) / 2, plabels, glabels)


@settings(max_examples=1200, deadline=None)
@given(matrices, st.integers(1, 9))
def test_metrics_match_brute_force(case, R):
    sm = build(case)
    rows = sm.scores.tolist()
    gl = sm.gallery_labels.tolist()
    want_ranks = [oracle_rank(r, gl, y) for r, y in zip(rows, sm.probe_labels.tolist())]
    ranks = rank_gallery(sm)
    assert ranks.tolist() == want_ranks
    assert cmc(ranks, R) == sum(r <= R for r in want_ranks) / len(want_ranks)
    aps = [oracle_ap(r, gl, y) for r, y in zip(rows, sm.probe_labels.tolist())]
    assert mean_ap(sm) == math.fsum(aps) / len(aps)


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_cmc_curve_properties(case):
    sm = build(case)
    curve = cmc_curve(rank_gallery(sm), len(sm.gallery_labels))
    assert np.all(np.diff(curve) >= 0)
    assert curve[-1] == 1.0


@settings(max_examples=200, deadline=None)
@given(matrices, st.floats(0.01, 100))
def test_positive_scaling_preserves_ranks(case, c):
    sm = build(case)
    scaled = ScoreMatrix(sm.scores * c, sm.probe_labels, sm.gallery_labels)
    assert rank_gallery(scaled).tolist() == rank_gallery(sm).tolist()


class TestSimilarity:
    def test_examples(self):
        e1 = np.eye(3)[0]
        assert similarity(e1, e1) == 1.0
        assert similarity(e1, np.eye(3)[1]) == 0.0
        a, b = make_rng(0).normal(size=(2, 16))
        assert similarity(a, b) == pytest.approx(sum(x * y for x, y in zip(a, b)), rel=1e-13)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            similarity(np.zeros(3), np.zeros(4))


class TestRanking:
    def test_unique_max(self):
        assert rank_gallery(ScoreMatrix([[0.1, 0.9, 0.3]], [1], [0, 1, 2])).tolist() == [1]

    @pytest.mark.parametrize("j", range(4))
    def test_all_ties(self, j):
        labels = [9] * 4
        labels[j] = 0
        assert rank_gallery(ScoreMatrix(np.zeros((1, 4)), [0], labels)).tolist() == [j + 1]

    def test_missing_label(self):
        with pytest.raises(ValueError):
            rank_gallery(ScoreMatrix(np.zeros((1, 2)), [5], [0, 1]))

    def test_matrix_validation(self):
        with pytest.raises(ShapeError):
            ScoreMatrix(np.zeros((2, 2)), [0], [0, 1])
        with pytest.raises(ValueError):
            ScoreMatrix([[np.nan]], [0], [0])


class TestCmcAndMap:
    def test_single_rank_three(self):
        assert (cmc([3], 1), cmc([3], 3), cmc([3], 10)) == (0.0, 1.0, 1.0)
        assert cmc([1, 1, 1], 1) == 1.0
        with pytest.raises(ValueError):
            cmc([1], 0)

    @pytest.mark.parametrize("r", [1, 2, 5])
    def test_ap_single_relevant(self, r):
        scores = -np.arange(5, dtype=float)[None]
        labels = [1] * 5
        labels[r - 1] = 0
        assert mean_ap(ScoreMatrix(scores, [0], labels)) == pytest.approx(1 / r)

    def test_ap_two_top_items(self):
        assert mean_ap(ScoreMatrix([[3.0, 2.0, 1.0]], [0], [0, 0, 1])) == 1.0


class TestCrossViewKl:
    def test_identical_sets(self):
        X = make_rng(1).normal(size=(10, 3))
        assert cross_view_kl(X, X).kl == 0.0

    def test_closed_form(self):
        # sets whose sample mean / sample std are exactly 1/1 and 0/1
        base = np.array([-1.0, 1.0]) / math.sqrt(2)  # ddof=1 std of this pair is 1
        res = cross_view_kl((base + 1)[:, None], base[:, None])
        assert res.kl == pytest.approx(0.5, rel=1e-14)

    def test_permutation_invariant_and_nonneg(self):
        rng = make_rng(2)
        A, B = rng.normal(size=(12, 4)), rng.normal(1, 2, size=(9, 4))
        v = cross_view_kl(A, B).kl
        assert v > 0
        assert cross_view_kl(A[::-1], B[rng.permutation(9)]).kl == pytest.approx(v, rel=1e-13)

    def test_too_few(self):
        with pytest.raises(ValueError):
            cross_view_kl(np.zeros((1, 2)), np.zeros((3, 2)))


@pytest.fixture(scope="module")
def length_setup():
    model = AdversarialModel(TOY_MODEL, seed=0)
    scramble(model.store, 0, scale=0.3)
    ds = generate_dataset(6, seq_len=(128, 128), dim=8, seed=2)
    return model, [p for p, _ in ds.pairs()], [g for _, g in ds.pairs()]


class TestLengthAblation:
    def test_shape_and_full_cell(self, length_setup):
        model, P, G = length_setup
        grid = variable_length_ablation(model, P, G)
        assert grid.rank1.shape == (8, 8)
        assert grid.lengths == DEFAULT_LENGTHS == (1, 2, 4, 8, 16, 32, 64, 128)
        assert grid.rank1[-1, -1] == evaluate_model(model, P, G)["rank1"]
        np.testing.assert_array_equal(grid.probe_effective, DEFAULT_LENGTHS)

    def test_cells_match_direct_truncation(self, length_setup):
        model, P, G = length_setup
        lengths = (1, 3, 16, 128)
        grid = variable_length_ablation(model, P, G, lengths)
        for i, a in enumerate(lengths):
            for j, b in enumerate(lengths):
                assert grid.rank1[i, j] == evaluate_model(model, P, G, a, b)["rank1"]

    def test_short_sequences_record_effective_length(self):
        model = AdversarialModel(TOY_MODEL, seed=0)
        ds = generate_dataset(4, seq_len=(3, 5), dim=8, seed=1)
        P, G = [p for p, _ in ds.pairs()], [g for _, g in ds.pairs()]
        grid = variable_length_ablation(model, P, G, (1, 4, 64))
        assert grid.probe_effective[-1] == np.mean([p.length for p in P])
        assert grid.gallery_effective[0] == 1.0


FUSION_CFG = TrainConfig(epochs=2, patience=1, batch_size=4, lam=0.0, feat_dim=6, hidden_dim=6,
                         cell_dim=6, proj_dim=3, latent_dim=3, num_layers=1, head_hidden=6)


class TestFusionAblation:
    def test_rows_and_identical_curves_at_lambda_zero(self):
        ds = generate_dataset(6, seq_len=(3, 6), dim=4, seed=0)
        held = generate_dataset(6, seq_len=(3, 6), dim=4, seed=0, identity_offset=50)
        out = fusion_ablation(ds, FUSION_CFG, seeds=[0, 1], checkpoints=(1, 2), heldout=held)
        assert len(out.rows) == 2 * 2 * 2
        assert {(r.seed, r.mode, r.epoch) for r in out.rows} == {
            (s, m, e) for s in (0, 1) for m in ("early", "late") for e in (1, 2)}
        assert len({r.dataset_digest for r in out.rows}) == 1
        for s in (0, 1):
            a, b = out.loss_curves[(s, "early")], out.loss_curves[(s, "late")]
            assert len(a) == 2 and a.tobytes() == b.tobytes()
        assert out.final_rank1(0, "early") == [r.rank1 for r in out.rows
                                               if (r.seed, r.mode, r.epoch) == (0, "early", 2)][0]

    def test_adversarial_term_separates_modes(self):
        ds = generate_dataset(6, seq_len=(3, 6), dim=4, seed=0)
        from dataclasses import replace
        out = fusion_ablation(ds, replace(FUSION_CFG, lam=0.6, train_fraction=0.5), seeds=[0],
                              checkpoints=(2,))
        assert out.loss_curves[(0, "early")].tobytes() != out.loss_curves[(0, "late")].tobytes()

    def test_bad_checkpoints(self):
        ds = generate_dataset(6, seq_len=(3, 6), dim=4)
        with pytest.raises(ValueError):
            fusion_ablation(ds, FUSION_CFG, seeds=[0], checkpoints=(3,))
        with pytest.raises(ValueError):
            fusion_ablation(ds, FUSION_CFG, seeds=[0], checkpoints=(0,))
