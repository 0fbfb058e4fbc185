import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advrnn.data import (
    MAGIC,
    dataset_bytes,
    dataset_digest,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_train_val,
)
from advrnn.evaluation import cmc, rank_gallery, score_matrix
from advrnn.serialization import ChecksumError, FileFormatError, TruncatedFileError, VersionError
from advrnn.vrnn import GALLERY, PROBE


def small(**kw):
    kw.setdefault("seed", 3)
    return generate_dataset(6, seq_len=(2, 9), dim=5, **kw)


def test_same_seed_bit_identical():
    assert dataset_bytes(small()) == dataset_bytes(small())
    assert dataset_digest(small()) != dataset_digest(small(seed=4))


def test_shape_and_labels():
    ds = small()
    assert ds.num_identities == len(ds.probe) == len(ds.gallery) == 6
    for i, (p, g) in enumerate(ds.pairs()):
        assert p.label == g.label == i
        assert p.view == PROBE and g.view == GALLERY
        assert 2 <= p.length <= 9 and 2 <= g.length <= 9
        assert p.frames.shape[1] == 5
    for spec in ds.identities:
        assert np.all(spec.amps >= 0)
        np.testing.assert_allclose(np.linalg.norm(spec.directions, axis=1), 1.0, rtol=1e-14)
    for tf in (ds.probe_transform, ds.gallery_transform):
        assert np.linalg.cond(tf.matrix) <= 100


def test_default_scale():
    s = generate_dataset().summary()
    assert s["identities"] == 32 and s["dim"] == 32
    assert 8 <= s["min_len"] and s["max_len"] <= 32


def test_zero_gap_zero_noise_views_coincide():
    ds = small(view_gap=0.0, noise_std=0.0)
    for p, g in ds.pairs():
        n = min(p.length, g.length)
        np.testing.assert_array_equal(p.frames[:n], g.frames[:n])


def test_scalar_formula_oracle():
    ds = small()
    tf = ds.probe_transform
    clean = small(noise_std=0.0)
    spec = ds.identities[2]
    seq = clean.probe[2]
    D = ds.dim
    for t in range(seq.length):
        u = [spec.base[d] + sum(spec.amps[k] * math.sin(spec.freqs[k] * t + spec.phases[k])
                                * spec.directions[k, d] for k in range(len(spec.amps)))
             for d in range(D)]
        for r in range(D):
            want = sum(tf.matrix[r, c] * u[c] for c in range(D)) + tf.offset[r]
            assert seq.frames[t, r] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_identity_offset_shares_cameras_but_not_people():
    a = small()
    b = small(identity_offset=100)
    np.testing.assert_array_equal(a.probe_transform.matrix, b.probe_transform.matrix)
    assert not np.array_equal(a.identities[0].base, b.identities[0].base)
    assert b.identities[0].id == 100


@pytest.mark.parametrize("kw", [dict(num_identities=1), dict(seq_len=(0, 4)), dict(seq_len=(5, 4)),
                                dict(noise_std=-1.0), dict(view_gap=-0.1)])
def test_invalid_arguments(kw):
    with pytest.raises(ValueError):
        generate_dataset(**kw)


def test_raw_mean_matcher_is_perfect_without_view_gap():
    ds = generate_dataset(32, view_gap=0.0, noise_std=0.0, seed=1)
    zp = np.array([p.frames.mean(0) for p, _ in ds.pairs()])
    zg = np.array([g.frames.mean(0) for _, g in ds.pairs()])
    labels = np.arange(32)
    assert cmc(rank_gallery(score_matrix(zp, zg, labels, labels, cosine=True)), 1) == 1.0


class TestSplit:
    def test_ten_identities(self):
        ds = generate_dataset(10, seq_len=(2, 3), dim=3)
        tr, va = split_train_val(ds, 0.9, seed=0)
        assert (len(tr), len(va)) == (9, 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 1000))
    def test_partition(self, L, frac, seed):
        ds = generate_dataset(L, seq_len=(1, 2), dim=2)
        tr, va = split_train_val(ds, frac, seed)
        a = {p.label for p, _ in tr}
        b = {p.label for p, _ in va}
        assert a | b == set(range(L)) and not a & b
        assert len(tr) == math.ceil(round(frac * L, 9))
        again = split_train_val(ds, frac, seed)
        assert [p.label for p, _ in again[0]] == [p.label for p, _ in tr]

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.5, 1.5])
    def test_bad_fraction(self, frac):
        with pytest.raises(ValueError):
            split_train_val(small(), frac)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        ds = small()
        path = tmp_path / "d.vads"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert dataset_bytes(back) == dataset_bytes(ds)
        for a, b in zip(ds.probe + ds.gallery, back.probe + back.gallery):
            assert a.frames.tobytes() == b.frames.tobytes()
            assert (a.label, a.view) == (b.label, b.view)
        assert back.seed == ds.seed and back.identity_offset == ds.identity_offset
        assert path.read_bytes()[:4] == MAGIC

    def test_corrupt_payload(self, tmp_path):
        path = tmp_path / "d.vads"
        save_dataset(small(), path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_dataset(path)

    def test_version_bump(self, tmp_path):
        path = tmp_path / "d.vads"
        save_dataset(small(), path)
        blob = bytearray(path.read_bytes())
        blob[4] += 1
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_dataset(path)

    @pytest.mark.parametrize("keep", [3, 20, -5])
    def test_truncated(self, tmp_path, keep):
        path = tmp_path / "d.vads"
        save_dataset(small(), path)
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(TruncatedFileError):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.vads"
        save_dataset(small(), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FileFormatError) as info:
            load_dataset(path)
        assert not isinstance(info.value, (VersionError, ChecksumError, TruncatedFileError))
