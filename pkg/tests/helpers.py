"""Shared oracles for the test modules."""

import numpy as np

from ultrlab.batch import SessionBatch
from ultrlab.ranker import init_params


def finite_difference(params, loss_fn, h=1e-5):
    """Central differences of ``loss_fn(params)`` over every flat parameter."""
    base = params.flat()
    out = np.zeros_like(base)
    for i in range(len(base)):
        e = np.zeros_like(base)
        e[i] = h
        out[i] = (loss_fn(params.with_flat(base + e)) - loss_fn(params.with_flat(base - e))) / (2 * h)
    return out


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def random_params(kind, n_features, rng, hidden=(6, 4), layer_norm=False):
    p = init_params(kind, n_features, hidden, layer_norm=layer_norm, rng=rng)
    return p.with_flat(rng.standard_normal(p.n_params) * 0.5)


def random_batch(rng, n_sessions=6, k=10, n_features=4, click_rate=0.3, short=True):
    features = rng.standard_normal((n_sessions, k, n_features))
    mask = np.ones((n_sessions, k), dtype=bool)
    if short:
        mask[0, k - 3 :] = False
    clicks = (rng.random((n_sessions, k)) < click_rate) & mask
    clicks[1, :2] = True
    clicks[1, 2:] = False
    return SessionBatch.from_arrays(features, clicks, mask)
