"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --cells 250000 --species 64 --repeat 5

Reports the best wall time per kernel and backend, the speed-up, and checks
that both backends return bit-identical arrays.
"""

import argparse
import time

import numpy as np

from biomap import kernels


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.asarray(x).tobytes() == np.asarray(y).tobytes() for x, y in zip(a, b))


def make_cases(n_cells, n_species, seed):
    rng = np.random.default_rng(seed)
    probs = rng.random((n_cells, n_species))
    species = np.arange(0, n_species, 2)
    thresholds = rng.uniform(0.3, 0.9, n_species)
    ranks = rng.integers(-1, 7, n_species)
    x = rng.normal(size=(n_cells // 4, 32))
    w = rng.normal(size=(32, 32))
    b = rng.normal(size=32)
    present = (rng.random((n_cells, n_species)) < 0.2).astype(np.uint8)
    log_rates = np.log(rng.uniform(0.01, 0.99, (6, n_species)))
    log_prior = np.log(np.full(6, 1 / 6))
    side = int(np.sqrt(n_cells) / 4) or 1
    mask = rng.random((side, side)) < 0.6
    mask[0, 0] = True
    return {
        "affine": lambda be: kernels.affine(x, w, b, backend=be),
        "count_moments": lambda be: kernels.count_moments(probs, species, backend=be),
        "at_least_one": lambda be: kernels.at_least_one(probs, species, backend=be),
        "max_status": lambda be: kernels.max_status(probs, thresholds, ranks, backend=be),
        "habitat_scores": lambda be: kernels.habitat_scores(present, log_rates, log_prior, backend=be),
        "nearest_land": lambda be: kernels.nearest_land(mask, backend=be),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=250_000)
    ap.add_argument("--species", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = sorted(kernels.BACKENDS)
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + f"{'speed-up':>10}  identical")
    for name, fn in make_cases(args.cells, args.species, args.seed).items():
        results = {be: _best(lambda: fn(be), args.repeat) for be in backends}
        row = f"{name:<16}" + "".join(f"{results[be][0] * 1e3:>10.2f}ms" for be in backends)
        if len(backends) == 2:
            speed = results["python"][0] / max(results["compiled"][0], 1e-12)
            same = _same(results["compiled"][1], results["python"][1])
            row += f"{speed:>9.1f}x  {same}"
        print(row)


if __name__ == "__main__":
    main()
