"""Acceptance criteria, one test per criterion.

Each test carries ``@pytest.mark.acceptance(N, title=...)``; the terminal
summary prints one PASS/FAIL line per criterion.
"""

import json
import math

import numpy as np
import pytest

from biomap import evalsuite as ev
from biomap import habitat, indicators, pipeline
from biomap.calibrate import apply_thresholds, fit_conformal_thresholds
from biomap.geogrid import GridSpec, make_tiling
from biomap.raster import DTYPES, RasterFile, RasterFormatError, raster_read, raster_write
from biomap.synthetic import habitat_plots

from test_sdm import gradient_check

FIXTURE = [0.9, 0.8, 0.1] + [0.0] * 7


@pytest.mark.acceptance(1, title="count mean 1.8 and half-width 2*sqrt(0.34) on the fixture")
def test_criterion_1_count_fixture():
    mean = indicators.count_mean(FIXTURE)
    hw = indicators.confidence_halfwidth(indicators.count_variance(FIXTURE))
    assert abs(mean - 1.8) <= 1e-12
    assert abs(hw - 2 * math.sqrt(0.34)) <= 1e-12
    assert f"{hw:.6f}" == "1.166190"
    # the published "1.8 +- 1.1" keeps one decimal by truncation
    assert math.floor(hw * 10) / 10 == 1.1


@pytest.mark.acceptance(2, title="at-least-one probability 0.982 on the fixture")
def test_criterion_2_at_least_one_fixture():
    assert abs(indicators.at_least_one_probability(FIXTURE) - 0.982) <= 1e-12


@pytest.mark.acceptance(3, title="analytic moments match the enumerated Poisson-binomial pmf")
def test_criterion_3_poisson_binomial_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        p = rng.random(int(rng.integers(0, 16)))
        # exercise exact zeros and ones as well
        p[rng.random(p.size) < 0.1] = 0.0
        p[rng.random(p.size) < 0.1] = 1.0
        pmf = indicators.brute_force_poisson_binomial(p)
        k = np.arange(pmf.size)
        mean = float((k * pmf).sum())
        var = float(((k - mean) ** 2 * pmf).sum())
        assert abs(indicators.count_mean(p) - mean) <= 1e-9
        assert abs(indicators.count_variance(p) - var) <= 1e-9
        assert abs(indicators.at_least_one_probability(p) - (1 - pmf[0])) <= 1e-12


@pytest.mark.acceptance(4, title="conformal omission <= alpha + 3/sqrt(n), thresholds monotone")
def test_criterion_4_conformal_coverage():
    rng = np.random.default_rng(4)
    alphas = (0.05, 0.1, 0.2)
    n_cal, n_test, n_species = 200, 200, 4
    # one beta distribution of presence scores per species
    shapes = [(2.0, 5.0), (5.0, 2.0), (1.0, 1.0), (0.5, 0.8)]
    omission = {a: [] for a in alphas}
    for _ in range(1000):
        cal = np.column_stack([rng.beta(a, b, n_cal) for a, b in shapes])
        test = np.column_stack([rng.beta(a, b, n_test) for a, b in shapes])
        prev = None
        for alpha in alphas:
            t = fit_conformal_thresholds(cal, np.ones((n_cal, n_species)), alpha).thresholds
            rate = np.mean(test < t, axis=0)
            assert np.all(rate <= alpha + 3 / math.sqrt(n_cal)), (alpha, rate)
            omission[alpha].append(rate)
            if prev is not None:
                assert np.all(t >= prev)
            prev = t
    for alpha in alphas:
        # averaged over trials the finite-sample guarantee is at most alpha
        assert np.mean(omission[alpha]) <= alpha + 1 / math.sqrt(1000 * n_test * n_species)


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _hand_recall(ranked, truth, k):
    return sum(1 for s in ranked[:k] if s in truth) / len(truth)


def _hand_fscore(pred, truth):
    if not pred and not truth:
        return 1.0
    tp = len(pred & truth)
    return 2 * tp / (len(pred) + len(truth))


@pytest.mark.acceptance(5, title="AUC, recall@k, fscore and habitat accuracy match oracles")
def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    codes = ["R21", "R22", "R31", "S41", "S42", "T11", "T13"]
    for _ in range(500):
        n = int(rng.integers(2, 60))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # ties included
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[:2] = (True, False)
        assert abs(ev.auc(scores, labels) - _brute_auc(scores, labels)) <= 1e-12

        ranked = rng.permutation(20).tolist()
        truth = set(rng.choice(25, size=int(rng.integers(1, 10)), replace=False).tolist())
        k = int(rng.integers(1, 25))
        assert ev.recall_at_k(ranked, truth, k) == _hand_recall(ranked, truth, k)

        pred = set(np.flatnonzero(rng.random(12) < 0.4).tolist())
        true = set(np.flatnonzero(rng.random(12) < 0.4).tolist())
        assert abs(ev.fscore(pred, true) - _hand_fscore(pred, true)) <= 1e-12

        m = int(rng.integers(1, 40))
        preds = rng.choice(codes, m).tolist()
        gold = rng.choice(codes, m).tolist()
        acc = [ev.habitat_accuracy(preds, gold, lv) for lv in (1, 2, 3)]
        assert acc[0] >= acc[1] >= acc[2]
        hand = [np.mean([a[:lv] == b[:lv] for a, b in zip(preds, gold)]) for lv in (1, 2, 3)]
        assert acc == pytest.approx(hand, abs=1e-12)


@pytest.mark.acceptance(6, title="analytic gradients match central differences on 20 models")
def test_criterion_6_gradient_check():
    errors = [gradient_check(seed) for seed in range(100, 120)]
    assert max(errors) <= 1e-4, errors


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def map_context(trained_world):
    tw = trained_world
    plots = habitat_plots(tw.world, tw.cells["train"])
    model = habitat.train_standin(plots, len(tw.world.catalog))
    return pipeline.MapContext(tw.world.grid, tw.predictor, tw.thresholds, tw.world.mask,
                               habitat_model=model)


def _all_products(ctx, catalog, out, workers, tile):
    pipeline.run_species_maps(ctx, catalog, out, workers, tile)
    defs = pipeline.run_indicator_maps(ctx, catalog, out, workers, tile)
    pipeline.run_habitat_maps(ctx, out, workers, tile)
    return defs


@pytest.fixture(scope="module")
def whole_grid_products(tmp_path_factory, trained_world, map_context):
    grid = trained_world.world.grid
    out = tmp_path_factory.mktemp("whole")
    defs = _all_products(map_context, trained_world.world.catalog, out, 1,
                         grid.width * grid.cell_size)
    return out, defs


@pytest.mark.acceptance(7, title="synthetic world: AUC >= 0.95, L3 accuracy >= 0.9, exact indicators")
def test_criterion_7_end_to_end(trained_world, whole_grid_products):
    tw = trained_world
    world, grid = tw.world, tw.world.grid
    out, defs = whole_grid_products
    assert grid.shape == (200, 200) and len(world.catalog) == 8
    assert len(set(world.habitat[world.mask.bitmask.ravel()])) == 3
    assert tw.split.block_size_m == 10_000

    test_cells = tw.cells["test"]
    probs = tw.predictor.predict_cells(test_cells)
    auc = ev.auc(probs.ravel(), tw.occupancy.label_matrix(test_cells).ravel())
    print(f"test-fold AUC {auc:.4f}")
    assert auc >= 0.95

    # every terrestrial cell of the held-out blocks, read back from the map product
    held_out = np.flatnonzero((tw.split.folds.ravel() == 2) & world.mask.bitmask.ravel())
    l3 = raster_read(out / "habitat" / "L3.rast").data[0].ravel()
    classes = json.loads((out / "habitat" / "classes.json").read_text())["L3"]
    predicted = [classes[i] for i in l3[held_out]]
    accuracy = ev.habitat_accuracy(predicted, world.habitat[held_out].tolist(), 3)
    print(f"held-out L3 accuracy {accuracy:.4f} over {held_out.size} cells")
    assert accuracy >= 0.9

    all_probs = tw.predictor.predict_cells(np.arange(grid.n_cells))
    for d in defs:
        raster = raster_read(out / "indicators" / f"{d.name}.rast")
        for c in range(grid.n_cells):
            row, col = divmod(c, grid.width)
            p = all_probs[c]
            if d.kind == "COUNT":
                sub = [p[s] for s in d.species]
                mean = indicators.count_mean(sub)
                hw = indicators.confidence_halfwidth(indicators.count_variance(sub))
                expected = [np.float32(mean), np.float32(hw)]
            elif d.kind == "AT_LEAST_ONE":
                expected = [np.float32(indicators.at_least_one_probability([p[s] for s in d.species]))]
            else:
                rank = indicators.most_threatened_status(apply_thresholds(p, tw.thresholds),
                                                         d.status_table)
                expected = [np.int16(indicators.STATUS_NODATA if rank is None else rank)]
            got = raster.data[:, row, col]
            assert got.tobytes() == np.array(expected, dtype=got.dtype).tobytes(), (d.name, c)


@pytest.mark.acceptance(8, title="map outputs byte-identical across workers {1,4,8} and tilings")
def test_criterion_8_determinism(tmp_path, trained_world, map_context, whole_grid_products):
    world = trained_world.world
    ref = _tree_bytes(whole_grid_products[0])
    assert len(make_tiling(world.grid, 25_000)) == 4
    assert any(k.endswith(".rast") for k in ref)
    for workers in (1, 4, 8):
        out = tmp_path / f"w{workers}"
        _all_products(map_context, world.catalog, out, workers, 25_000)
        assert _tree_bytes(out) == ref, workers


@pytest.mark.acceptance(9, title="coverage arithmetic reproduces 2.4% and 58.6%")
def test_criterion_9_coverage_arithmetic():
    stats = ev.coverage_statistics({"natura": int(132.8e6), "forest": int(3.23e9)}, int(5.5e9))
    assert abs(stats["natura"].fraction * 100 - 2.4) <= 0.05
    assert abs(stats["forest"].fraction * 100 - 58.6) <= 0.5


def _random_raster(rng, dtype):
    grid = GridSpec(float(rng.uniform(-1e6, 1e6)), float(rng.uniform(-1e6, 1e6)),
                    int(rng.integers(1, 30)), int(rng.integers(1, 30)),
                    float(rng.choice([50.0, 250.0, 12.5])))
    shape = (int(rng.integers(1, 4)), grid.height, grid.width)
    if dtype == "f32":
        data = rng.normal(scale=1e3, size=shape).astype("<f4")
        nodata = float("nan") if rng.random() < 0.5 else -9999.0
        data[rng.random(shape) < 0.2] = np.float32(nodata)
    else:
        info = np.iinfo(DTYPES[dtype])
        data = rng.integers(info.min, info.max, size=shape, endpoint=True).astype(DTYPES[dtype])
        nodata = int(rng.integers(info.min, info.max, endpoint=True))
        data[rng.random(shape) < 0.2] = nodata
    return RasterFile(grid, dtype, data, [f"b{i}" for i in range(shape[0])], nodata)


@pytest.mark.acceptance(10, title="random rasters round-trip bit-exactly, corruption rejected")
def test_criterion_10_raster_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    dtypes = list(DTYPES)
    for i in range(100):
        r = _random_raster(rng, dtypes[i % len(dtypes)])
        path = tmp_path / f"r{i}.rast"
        raster_write(path, r)
        back = raster_read(path)
        assert back.data.tobytes() == r.data.tobytes()
        assert back.grid == r.grid and back.dtype == r.dtype and back.band_names == r.band_names
        assert (math.isnan(back.nodata) and math.isnan(r.nodata)) or back.nodata == r.nodata

        blob = path.read_bytes()
        head_end = blob.index(b"\n")
        corruptions = [blob[:-1], blob + b"\x00", blob[head_end + 1:], b"\x00" + blob[1:]]
        for j, bad in enumerate(corruptions):
            bad_path = tmp_path / f"bad{i}_{j}.rast"
            bad_path.write_bytes(bad)
            with pytest.raises(RasterFormatError) as exc:
                raster_read(bad_path)
            assert str(bad_path) in str(exc.value) or "bytes" in str(exc.value)
