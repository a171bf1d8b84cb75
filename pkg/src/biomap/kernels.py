"""Backend selection for the per-cell kernels.

The compiled extension ``biomap._ckernels`` is used when it imports; otherwise
(or when ``BIOMAP_PURE_PYTHON=1``) the numpy twin in ``_kernels_py`` serves the
same functions. Both return bit-identical results.
"""

import logging
import os

import numpy as np

from biomap import _kernels_py

log = logging.getLogger(__name__)

_compiled = None
if not os.environ.get("BIOMAP_PURE_PYTHON"):
    try:
        from biomap import _ckernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"


def get_backend(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {sorted(BACKENDS)}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def affine(x, weight, bias, backend=None):
    return get_backend(backend).affine(_f64(x), _f64(weight), _f64(bias))


def count_moments(probs, species, backend=None):
    """Per-row sum of ``p`` and ``p(1-p)`` over the ``species`` columns."""
    return get_backend(backend).count_moments(_f64(probs), _i64(species))


def at_least_one(probs, species, backend=None):
    return get_backend(backend).at_least_one(_f64(probs), _i64(species))


def max_status(probs, thresholds, ranks, backend=None):
    """Max status rank over species with ``p >= t``; -1 when none qualifies."""
    return get_backend(backend).max_status(_f64(probs), _f64(thresholds), _i64(ranks))


def habitat_scores(present, log_rates, log_prior, backend=None):
    present = np.ascontiguousarray(present, dtype=np.uint8)
    return get_backend(backend).habitat_scores(present, _f64(log_rates), _f64(log_prior))


def nearest_land(mask, backend=None):
    return get_backend(backend).nearest_land(np.asarray(mask, dtype=bool))
