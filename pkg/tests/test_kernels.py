"""The compiled and numpy kernel backends must agree bit for bit."""

import numpy as np
import pytest

from biomap import kernels

BACKENDS = sorted(kernels.BACKENDS)
needs_compiled = pytest.mark.skipif("compiled" not in kernels.BACKENDS,
                                    reason="compiled extension not built")


def test_backend_selection():
    assert kernels.BACKEND in kernels.BACKENDS
    assert kernels.get_backend() is kernels.BACKENDS[kernels.BACKEND]
    with pytest.raises(ValueError, match="not available"):
        kernels.get_backend("fortran")


@pytest.mark.parametrize("backend", BACKENDS)
def test_affine_matches_hand_values(backend):
    x = np.array([[1.0, 2.0, 3.0]])
    w = np.array([[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    b = np.array([0.25, -1.0])
    assert np.array_equal(kernels.affine(x, w, b, backend=backend), [[-1.75, 2.0]])


@pytest.mark.parametrize("backend", BACKENDS)
def test_affine_batch_invariant(backend, rng):
    x = rng.normal(size=(37, 11))
    w = rng.normal(size=(5, 11))
    b = rng.normal(size=5)
    full = kernels.affine(x, w, b, backend=backend)
    rows = np.vstack([kernels.affine(x[i:i + 1], w, b, backend=backend) for i in range(37)])
    assert np.array_equal(full, rows)


@needs_compiled
def test_parity_affine(rng):
    x, w, b = rng.normal(size=(64, 23)), rng.normal(size=(9, 23)), rng.normal(size=9)
    assert np.array_equal(kernels.affine(x, w, b, backend="python"),
                          kernels.affine(x, w, b, backend="compiled"))


@needs_compiled
def test_parity_indicator_kernels(rng):
    probs = rng.random((300, 40))
    probs[rng.random(probs.shape) < 0.2] = 0.0
    species = np.sort(rng.choice(40, size=17, replace=False))
    for name in ("count_moments", "at_least_one"):
        a = getattr(kernels, name)(probs, species, backend="python")
        b = getattr(kernels, name)(probs, species, backend="compiled")
        assert all(np.array_equal(u, v) for u, v in zip(np.atleast_2d(a), np.atleast_2d(b)))
    t = rng.random(40)
    t[3] = np.inf
    ranks = rng.integers(-1, 7, size=40)
    assert np.array_equal(kernels.max_status(probs, t, ranks, backend="python"),
                          kernels.max_status(probs, t, ranks, backend="compiled"))


@needs_compiled
def test_parity_habitat_scores(rng):
    present = (rng.random((120, 30)) < 0.3).astype(np.uint8)
    rates = np.log(rng.uniform(0.1, 1.0, size=(4, 30)))
    prior = np.log([0.1, 0.2, 0.3, 0.4])
    assert np.array_equal(kernels.habitat_scores(present, rates, prior, backend="python"),
                          kernels.habitat_scores(present, rates, prior, backend="compiled"))


@needs_compiled
@pytest.mark.parametrize("density", [0.001, 0.05, 0.5, 1.0])
def test_parity_nearest_land(rng, density):
    mask = rng.random((45, 61)) < density
    mask[7, 9] = True
    assert np.array_equal(kernels.nearest_land(mask, backend="python"),
                          kernels.nearest_land(mask, backend="compiled"))


@pytest.mark.parametrize("backend", BACKENDS)
def test_count_moments_sequential_sum(backend):
    probs = np.array([[0.9, 0.8, 0.1] + [0.0] * 7])
    mean, var = kernels.count_moments(probs, np.arange(10), backend=backend)
    assert mean[0] == 0.9 + 0.8 + 0.1
    assert var[0] == 0.9 * (1 - 0.9) + 0.8 * (1 - 0.8) + 0.1 * (1 - 0.1)


@pytest.mark.parametrize("backend", BACKENDS)
def test_max_status_none_sentinel(backend):
    probs = np.array([[0.1, 0.2], [0.9, 0.9]])
    ranks = np.array([3, -1])
    out = kernels.max_status(probs, np.array([0.5, 0.5]), ranks, backend=backend)
    assert out.tolist() == [-1, 3]
