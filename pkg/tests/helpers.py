"""Shared builders for the test modules."""

import numpy as np

from maskcon import model as mdl
from maskcon.data import Batch


def small_params(seed=0, input_dim=6, hidden=(5,), feat=4, proj_hidden=(7,), proj=3, classes=3):
    """Tiny model with random (nonzero) biases so no unit sits exactly on a ReLU kink."""
    rng = np.random.default_rng(seed)
    p = mdl.init_params(input_dim, classes, hidden, feat, proj_hidden, proj, rng=rng)
    biases = {k: rng.normal(0.0, 0.1, size=v.shape) for k, v in p.tensors.items() if k.endswith(".bias")}
    return p.replace(biases)


def random_unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_batch(rng, b, input_dim, n_coarse=3, id_offset=0):
    return Batch(
        query_views=rng.normal(size=(b, input_dim)),
        key_views=rng.normal(size=(b, input_dim)),
        coarse_labels=rng.integers(0, n_coarse, size=b),
        fine_labels=rng.integers(0, 2 * n_coarse, size=b),
        ids=np.arange(id_offset, id_offset + b),
    )
