import types

import numpy as np
import pytest

from biomap import calibrate, sdm, synthetic
from biomap.occurrence import aggregate_to_grid, split_spatial_blocks, target_group_filter

# (criterion number, title, outcome) for the terminal summary
ACCEPTANCE_RESULTS = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ACCEPTANCE_RESULTS.append((marker.args[0], marker.kwargs.get("title", item.name), rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number:>2}: {title}")


SPLIT_SEED = 3
FRACTIONS = (0.6, 0.2, 0.2)


@pytest.fixture(scope="session")
def trained_world():
    """The 200x200 synthetic world, aggregated, split, trained and calibrated once."""
    world = synthetic.make_world(size=200, seed=0)
    records = synthetic.sample_records(world, seed=1)
    occ = target_group_filter(aggregate_to_grid(records, world.grid, world.catalog, world.mask))
    split = split_spatial_blocks(world.grid, 10_000, FRACTIONS, SPLIT_SEED)
    folds = split.folds.ravel()[occ.cells]
    cells = {f: occ.cells[folds == i] for i, f in enumerate(("train", "val", "test"))}
    relocate = world.mask.relocation_table()

    def xs(flat):
        return {m: world.features[m][relocate[flat]] for m in sdm.MODALITIES}

    model = sdm.fit(xs(cells["train"]), occ.label_matrix(cells["train"]),
                    sdm.TrainConfig(seed=0), world.shapes)
    predictor = sdm.ModelPredictor(model, world.grid, world.features, world.mask)
    val_probs = predictor.predict_cells(cells["val"])
    thresholds = calibrate.fit_conformal_thresholds(val_probs, occ.label_matrix(cells["val"]), 0.1)
    return types.SimpleNamespace(world=world, occupancy=occ, split=split, cells=cells, model=model,
                                 predictor=predictor, thresholds=thresholds)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
