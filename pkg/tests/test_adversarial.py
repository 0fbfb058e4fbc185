import math

import numpy as np
import pytest
from conftest import TOY_MODEL, scramble, toy_rows

from advrnn.adversarial import (
    EARLY,
    LATE,
    AdversarialConfig,
    AdversarialModel,
    ClassifierHead,
    GradientReversal,
    Optimizer,
    classification_losses,
    classify,
    gradient_reversal,
    total_objective,
    update_step,
    verification_regularizer,
)
from advrnn.numerics import ParamStore, ShapeError, make_rng, softmax_cross_entropy
from advrnn.vrnn import GALLERY, PROBE, FrameSequence, SequenceEmbedding


def heads(L=10, Z=4, rng=None):
    store = ParamStore()
    return (store, ClassifierHead(store, "head_y", Z, 6, L, rng),
            ClassifierHead(store, "head_d", Z, 6, L, rng))


def term_grads(model, rows, fusion, rng_seed):
    """Separately computed dL_V, dL_y, dL_d, dL_R (one shared forward pass)."""
    cache = model.forward(rows, 0.6, fusion, make_rng(rng_seed))
    out = {}
    for name, coefs in (("V", (1, 0, 0, 0)), ("y", (0, 1, 0, 0)), ("d", (0, 0, 1, 0)),
                        ("R", (0, 0, 0, 1))):
        model.store.zero_grad()
        model.backward(cache, *coefs)
        out[name] = model.store.copy_grads()
    return out


class TestHeads:
    def test_zero_heads_uniform(self):
        _, hy, hd = heads()
        z = SequenceEmbedding(np.ones(4), PROBE, 3)
        logits = classify(z, hy)
        assert logits.shape == (10,)
        assert np.array_equal(logits, np.zeros(10))
        ly, ld = classification_losses(z, z, 3, hy, hd)
        assert ly == ld == pytest.approx(math.log(10), abs=1e-15)
        assert verification_regularizer(z, z, 3, hy, hd) == pytest.approx(2 * math.log(10))

    def test_saturated(self):
        _, hy, hd = heads()
        for h in (hy, hd):
            h.b2[...] = 0.0
            h.b2[5] = 40.0
        ly, ld = classification_losses(np.zeros(4), np.zeros(4), 5, hy, hd)
        assert ly + ld < 1e-9

    def test_composition_oracle(self):
        _, hy, hd = heads(rng=make_rng(0))
        rng = make_rng(1)
        zp, zg = rng.normal(size=4), rng.normal(size=4)

        def mlp(h, x):
            return h.W2 @ np.tanh(h.W1 @ x + h.b1) + h.b2

        ly, ld = classification_losses(zp, zg, 2, hy, hd)
        assert ly == pytest.approx(softmax_cross_entropy(mlp(hy, zp), 2), rel=1e-12)
        assert ld == pytest.approx(softmax_cross_entropy(mlp(hd, zg), 2), rel=1e-12)
        cross = verification_regularizer(zp, zg, 2, hy, hd)
        assert cross == pytest.approx(softmax_cross_entropy(mlp(hd, zp), 2)
                                      + softmax_cross_entropy(mlp(hy, zg), 2), rel=1e-12)

    def test_identical_embeddings_cross_equals_straight(self):
        _, hy, hd = heads(rng=make_rng(2))
        z = make_rng(3).normal(size=4)
        assert verification_regularizer(z, z, 1, hy, hd) == pytest.approx(
            sum(classification_losses(z, z, 1, hy, hd)), rel=1e-14)

    def test_errors(self):
        _, hy, hd = heads()
        with pytest.raises(ShapeError):
            classify(np.zeros(5), hy)
        with pytest.raises(ValueError):
            classification_losses(np.zeros(4), np.zeros(4), 10, hy, hd)
        with pytest.raises(ValueError):
            ClassifierHead(ParamStore(), "head_x", 4, 4, 4)

    def test_group_registration(self):
        store, _, _ = heads()
        assert set(store.groups()) == {"head_y", "head_d"}


class TestGradientReversal:
    def test_forward_is_bitwise_identity(self):
        x = np.array([1.5, -2.0])
        y = gradient_reversal(x, 0.6)
        assert y is x or np.array_equal(y, x)
        assert y.tobytes() == x.tobytes()

    def test_backward(self):
        np.testing.assert_array_equal(GradientReversal(0.6).backward(np.ones(2)), [-0.6, -0.6])
        np.testing.assert_array_equal(GradientReversal(0.0).backward(np.ones(3)), np.zeros(3))

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            GradientReversal(-0.1)


class TestObjective:
    @pytest.mark.parametrize("fusion", [EARLY, LATE])
    def test_breakdown_identities(self, toy_model, fusion):
        rows = toy_rows(0)
        bd = toy_model.forward(rows, 0.6, fusion, make_rng(0)).breakdown
        assert abs(bd.L_C - (bd.L_y + bd.L_d)) <= 1e-10
        assert abs(bd.E - (bd.L_V + bd.L_C + 0.6 * bd.L_R)) <= 1e-10

    def test_per_pair_composition(self, toy_model):
        """L_C and L_R are pair means of the per-pair head losses on the final posterior means."""
        rows = toy_rows(1)
        cache = toy_model.forward(rows, 0.6, LATE, make_rng(0))
        bd = cache.breakdown
        z = cache.fwd.last(cache.fwd.qm)
        P = len(rows) / 2
        assert cache.n_pairs == P
        hy, hd = toy_model.head_y, toy_model.head_d
        pl, gl = cache.labels[cache.probe_idx], cache.labels[cache.gallery_idx]
        np.testing.assert_array_equal(pl, gl)
        zp, zg = z[cache.probe_idx], z[cache.gallery_idx]
        L_C = sum(sum(classification_losses(a, b, int(y), hy, hd))
                  for a, b, y in zip(zp, zg, pl)) / P
        L_R = -sum(verification_regularizer(a, b, int(y), hy, hd)
                   for a, b, y in zip(zp, zg, pl)) / P
        assert bd.L_C == pytest.approx(L_C, rel=1e-12)
        assert bd.L_R == pytest.approx(L_R, rel=1e-12)

    def test_lambda_zero_drops_regulariser(self, toy_model):
        rows = toy_rows(2)
        a = toy_model.forward(rows, 0.0, EARLY, make_rng(4)).breakdown
        assert a.E == a.L_V + a.L_C

    def test_lambda_zero_gradients_match_plain_objective(self, toy_model):
        rows = toy_rows(3)
        toy_model.loss_and_grad(rows, AdversarialConfig(lam=0.0), make_rng(0))
        g0 = toy_model.store.copy_grads()
        cache = toy_model.forward(rows, 0.0, EARLY, make_rng(0))
        toy_model.store.zero_grad()
        toy_model.backward(cache, 1, 1, 1, 0)
        for k, v in toy_model.store.copy_grads().items():
            np.testing.assert_array_equal(v, g0[k])

    def test_errors(self, toy_model):
        with pytest.raises(ValueError):
            toy_model.forward([], 0.6, EARLY, make_rng(0))
        bad = [FrameSequence(np.zeros((2, 8)), 9, PROBE), FrameSequence(np.zeros((2, 8)), 9, GALLERY)]
        with pytest.raises(ValueError):
            toy_model.forward(bad, 0.6, EARLY, make_rng(0))
        with pytest.raises(ValueError):
            toy_model.forward(toy_rows(0), 0.6, "middle", make_rng(0))
        with pytest.raises(ValueError):
            AdversarialConfig(lam=-1.0)


@pytest.mark.parametrize("fusion", [EARLY, LATE])
def test_reversed_gradient_term_by_term(toy_model, fusion):
    """Encoder and head gradients under the reversal equal the per-group update assembled from separate terms."""
    rows = toy_rows(4)
    lam = 0.6
    t = term_grads(toy_model, rows, fusion, 7)
    toy_model.loss_and_grad(rows, AdversarialConfig(lam=lam, fusion=fusion), make_rng(7))
    got = toy_model.store.copy_grads()
    for k, g in got.items():
        group = k.split(".")[0]
        if group == "encoder":
            want = t["V"][k] + t["y"][k] + t["d"][k] - lam * t["R"][k]
        elif group == "decoder":
            want = t["V"][k]
        elif group == "head_y":
            want = t["y"][k] - lam * t["R"][k]
        else:
            want = t["d"][k] - lam * t["R"][k]
        np.testing.assert_allclose(g, want, rtol=0, atol=1e-10)


def test_early_and_late_agree_at_lambda_zero(toy_model):
    rows = toy_rows(5)
    a = toy_model.forward(rows, 0.0, EARLY, make_rng(1)).breakdown
    b = toy_model.forward(rows, 0.0, LATE, make_rng(1)).breakdown
    assert (a.L_V, a.L_C, a.E) == (b.L_V, b.L_C, b.E)


def test_total_objective_is_training_gradient(toy_model):
    rows = toy_rows(6)
    adv = AdversarialConfig(lam=0.6)
    bd = total_objective(rows, toy_model, adv, make_rng(2))
    g = toy_model.store.copy_grads()
    bd2 = toy_model.loss_and_grad(rows, adv, make_rng(2), reverse=True)
    assert bd == bd2
    for k, v in toy_model.store.copy_grads().items():
        np.testing.assert_array_equal(v, g[k])


class TestUpdate:
    def test_zero_lr_is_noop(self, toy_model):
        before = toy_model.store.copy_values()
        for kind in ("sgd", "adam"):
            opt = Optimizer(toy_model.store, kind, 0.0)
            toy_model.loss_and_grad(toy_rows(0), AdversarialConfig(lr=0.0), make_rng(0))
            update_step(toy_model.store, opt)
        for k, v in toy_model.store.params.items():
            assert v.tobytes() == before[k].tobytes()

    def test_sgd_quadratic(self):
        store = ParamStore()
        store.add("w.x", np.array([3.0]))
        store.grads["w.x"][...] = 2 * store["w.x"]  # d/dx x^2
        update_step(store, Optimizer(store, "sgd", 0.1))
        assert store["w.x"][0] == pytest.approx(3.0 - 0.1 * 6.0, abs=1e-15)

    def test_adam_first_step_is_lr_times_sign(self):
        store = ParamStore()
        store.add("w.x", np.array([1.0, -1.0]))
        store.grads["w.x"][...] = [5.0, -0.01]
        update_step(store, Optimizer(store, "adam", 0.01))
        np.testing.assert_allclose(store["w.x"], [0.99, -0.99], rtol=1e-6)

    def test_non_finite_gradient(self):
        store = ParamStore()
        store.add("w.x", np.zeros(2))
        store.grads["w.x"][0] = np.nan
        with pytest.raises(FloatingPointError):
            update_step(store, Optimizer(store, "sgd", 0.1))
        assert np.array_equal(store["w.x"], np.zeros(2))

    def test_sgd_step_matches_groupwise_update_with_finite_differences(self):
        """Two-parameter toy objective: one SGD step from the reversal path
        equals the per-group update built from finite-difference partials."""
        model = AdversarialModel(TOY_MODEL, seed=1)
        scramble(model.store, 1)
        rows = toy_rows(2)
        names = ["encoder.enc.b2", "head_y.b2"]
        idx = 0
        lam, lr = 0.6, 0.05

        def terms():
            bd = model.forward(rows, lam, EARLY, make_rng(9), keep_cache=False).breakdown
            return bd.L_V, bd.L_y, bd.L_d, bd.L_R

        def fd(name, which):
            flat = model.store[name].reshape(-1)
            orig, h = flat[idx], 1e-6
            flat[idx] = orig + h
            up = terms()
            flat[idx] = orig - h
            dn = terms()
            flat[idx] = orig
            return [(u - d) / (2 * h) for u, d in zip(up, dn)][which]

        before = {n: model.store[n].reshape(-1)[idx] for n in names}
        V, Y, D, R = 0, 1, 2, 3
        want_e = before[names[0]] - lr * (fd(names[0], V) + fd(names[0], Y) + fd(names[0], D)
                                          - lam * fd(names[0], R))
        want_y = before[names[1]] - lr * (fd(names[1], Y) - lam * fd(names[1], R))
        model.loss_and_grad(rows, AdversarialConfig(lam=lam, lr=lr, optimizer="sgd"), make_rng(9))
        update_step(model.store, Optimizer(model.store, "sgd", lr))
        assert model.store[names[0]].reshape(-1)[idx] == pytest.approx(want_e, abs=1e-8)
        assert model.store[names[1]].reshape(-1)[idx] == pytest.approx(want_y, abs=1e-8)


def test_training_step_determinism():
    def run():
        m = AdversarialModel(TOY_MODEL, seed=5)
        opt = Optimizer(m.store, "adam", 1e-2)
        rng = make_rng(3)
        out = []
        for _ in range(3):
            out.append(m.loss_and_grad(toy_rows(1), AdversarialConfig(), rng).as_row())
            opt.step()
        return out
    assert run() == run()


def test_embed_matches_single_sequence_embedding(toy_model):
    from advrnn.vrnn import embed_sequence
    rows = toy_rows(8)
    batch = toy_model.embed(rows)
    for b, r in enumerate(rows):
        np.testing.assert_allclose(batch[b], embed_sequence(r, toy_model.vrnn).vector,
                                   rtol=1e-12, atol=1e-14)
