import numpy as np
import pytest

from advrnn.adversarial import AdversarialModel, ModelConfig
from advrnn.numerics import make_rng
from advrnn.vrnn import GALLERY, PROBE, FrameSequence, VrnnConfig

TOY_VRNN = VrnnConfig(frame_dim=8, feat_dim=8, hidden_dim=8, cell_dim=8, proj_dim=4,
                      latent_dim=4, num_layers=2)
TOY_MODEL = ModelConfig(TOY_VRNN, num_identities=4, head_hidden=8)


def scramble(store, seed, scale=0.5):
    """Overwrite every parameter with N(0, scale^2) draws.

    Default initialisation leaves some gradient paths at ~1e-8, below what
    central differences resolve on a loss of order 100; larger weights keep
    every path well above roundoff.
    """
    rng = make_rng([seed, 99])
    for v in store.params.values():
        v[...] = rng.normal(0.0, scale, v.shape)


def toy_rows(seed, n_pairs=4, dim=8, lengths=(3, 4)):
    rng = make_rng([seed, 7])
    rows = []
    for i in range(n_pairs):
        a, b = lengths[i % 2], lengths[(i + 1) % 2]
        rows.append(FrameSequence(rng.normal(size=(a, dim)), i, PROBE))
        rows.append(FrameSequence(rng.normal(size=(b, dim)), i, GALLERY))
    return rows


@pytest.fixture
def toy_model():
    m = AdversarialModel(TOY_MODEL, seed=3)
    scramble(m.store, 3)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
