"""Pure numpy implementations of the hot per-cell kernels.

Every routine accumulates over the species (or input) axis sequentially, in
index order, and vectorizes only over cells. That makes each cell's result
independent of how many cells are processed together, so tiled and
whole-grid runs agree bit for bit, and it matches the loop order of the
compiled twin in ``_ckernels.pyx``.
"""

import numpy as np

_CHUNK = 4096


def affine(x, weight, bias):
    """``x @ weight.T + bias`` with a fixed, batch-invariant summation order."""
    n, n_in = x.shape
    out = np.empty((n, weight.shape[0]), dtype=np.float64)
    out[:] = bias
    for j in range(n_in):
        out += x[:, j, None] * weight[None, :, j]
    return out


def count_moments(probs, species):
    n = probs.shape[0]
    mean = np.zeros(n, dtype=np.float64)
    var = np.zeros(n, dtype=np.float64)
    for s in species:
        p = probs[:, s]
        mean += p
        var += p * (1.0 - p)
    return mean, var


def at_least_one(probs, species):
    absent = np.ones(probs.shape[0], dtype=np.float64)
    for s in species:
        absent *= 1.0 - probs[:, s]
    return 1.0 - absent


def max_status(probs, thresholds, ranks):
    best = np.full(probs.shape[0], -1, dtype=np.int64)
    for s in range(probs.shape[1]):
        r = int(ranks[s])
        if r < 0:
            continue
        hit = probs[:, s] >= thresholds[s]
        np.maximum(best, np.where(hit, r, -1), out=best)
    return best


def habitat_scores(present, log_rates, log_prior):
    n = present.shape[0]
    scores = np.empty((n, log_rates.shape[0]), dtype=np.float64)
    scores[:] = log_prior
    for s in range(present.shape[1]):
        sel = present[:, s].astype(bool)
        if sel.any():
            scores[sel] += log_rates[:, s]
    return scores


def nearest_land(mask):
    """Flat index of the nearest land cell for every cell of a boolean grid.

    Distances are squared integer cell offsets, so comparisons are exact; ties
    go to the smallest row-major index because land cells are enumerated in
    row-major order and ``argmin`` returns the first minimum.
    """
    h, w = mask.shape
    flat = mask.ravel()
    out = np.arange(h * w, dtype=np.int64)
    land = np.flatnonzero(flat)
    if land.size == 0:
        raise ValueError("mask has no land cells")
    water = np.flatnonzero(~flat)
    if water.size == 0:
        return out
    land_r = land // w
    land_c = land % w
    for start in range(0, water.size, _CHUNK):
        chunk = water[start:start + _CHUNK]
        dr = (chunk // w)[:, None] - land_r[None, :]
        dc = (chunk % w)[:, None] - land_c[None, :]
        d2 = dr * dr + dc * dc
        out[chunk] = land[np.argmin(d2, axis=1)]
    return out
