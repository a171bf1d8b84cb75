import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biomap.geogrid import CellIndex, GridSpec, TerrestrialMask, cell_center
from biomap.occurrence import (FOLDS, OccurrenceRecord, SpeciesCatalog, aggregate_to_grid,
                               block_uniform, read_occupancy_csv, read_occurrences_csv,
                               split_spatial_blocks, target_group_filter, write_occupancy_csv,
                               write_occurrences_csv)

GRID = GridSpec(0, 0, 10, 10, 50)
CAT = SpeciesCatalog(["A", "B"])


def _at(col, row, grid=GRID):
    return cell_center(grid, CellIndex(col, row))


def test_single_po_record():
    occ = aggregate_to_grid([OccurrenceRecord("A", *_at(0, 0))], GRID, CAT)
    assert occ.values == {0: {0: 1}}
    assert occ.vector(0).tolist() == [1, 0]


def test_pa_plot_implies_absences():
    occ = aggregate_to_grid([OccurrenceRecord("A", *_at(1, 1), source="PA", plot_id="p1")],
                            GRID, CAT)
    assert occ.values == {11: {0: 1, 1: 0}}


def test_presence_beats_absence():
    recs = [OccurrenceRecord("A", *_at(2, 3), source="PA", plot_id="p"),
            OccurrenceRecord("B", *_at(2, 3))]
    occ = aggregate_to_grid(recs, GRID, CAT)
    assert occ.values[32] == {0: 1, 1: 1}


def test_empty_survey_plot_records_all_absent():
    occ = aggregate_to_grid([OccurrenceRecord("", *_at(4, 4), source="PA", plot_id="p")], GRID, CAT)
    assert occ.values[44] == {0: 0, 1: 0}
    kept = target_group_filter(occ)
    assert kept.cells.tolist() == [44]


def test_unknown_and_out_of_extent_counted():
    recs = [OccurrenceRecord("Z", *_at(0, 0)), OccurrenceRecord("A", -10.0, 5.0),
            OccurrenceRecord("A", *_at(1, 0))]
    occ = aggregate_to_grid(recs, GRID, CAT)
    assert occ.report.unknown_species == {"Z": 1}
    assert occ.report.out_of_extent == 1
    assert occ.values == {1: {0: 1}}


def test_empty_record_set():
    occ = aggregate_to_grid([], GRID, CAT)
    assert occ.values == {}
    assert target_group_filter(occ).cells.size == 0


def test_water_records_relocate():
    land = np.zeros(GRID.shape, bool)
    land[0, 5] = True
    occ = aggregate_to_grid([OccurrenceRecord("A", *_at(0, 0))], GRID, CAT, TerrestrialMask(land))
    assert occ.values == {5: {0: 1}}
    assert occ.report.relocated == 1


def test_pa_record_needs_plot_id():
    with pytest.raises(ValueError):
        OccurrenceRecord("A", 0, 0, source="PA")
    with pytest.raises(ValueError):
        OccurrenceRecord("A", 0, 0, source="XX")


def test_target_group_filter_examples():
    recs = [OccurrenceRecord("A", *_at(i, i)) for i in range(3)]
    occ = aggregate_to_grid(recs, GRID, CAT)
    assert target_group_filter(occ).cells.tolist() == [0, 11, 22]
    every = [OccurrenceRecord("B", *_at(c, r)) for r in range(10) for c in range(10)]
    full = aggregate_to_grid(every, GRID, CAT)
    assert np.array_equal(target_group_filter(full).cells, full.cells)


_rec = st.tuples(st.sampled_from(["A", "B", "C", ""]), st.integers(0, 3), st.integers(0, 3),
                 st.sampled_from(["PO", "PA"]), st.integers(0, 3))


def _records(rows):
    g = GridSpec(0, 0, 4, 4, 50)
    out = []
    for sid, c, r, src, plot in rows:
        if src == "PO" and not sid:
            continue
        out.append(OccurrenceRecord(sid, *_at(c, r, g), source=src,
                                    plot_id=f"p{plot}" if src == "PA" else None))
    return g, out


@settings(max_examples=100, deadline=None)
@given(st.lists(_rec, max_size=25), st.randoms(use_true_random=False))
def test_aggregation_order_independent(rows, rnd):
    g, recs = _records(rows)
    cat = SpeciesCatalog(["A", "B", "C"])
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert aggregate_to_grid(recs, g, cat) == aggregate_to_grid(shuffled, g, cat)


@settings(max_examples=100, deadline=None)
@given(st.lists(_rec, max_size=25))
def test_presence_wins_rule(rows):
    g, recs = _records(rows)
    cat = SpeciesCatalog(["A", "B", "C"])
    occ = aggregate_to_grid(recs, g, cat)
    for flat in range(g.n_cells):
        for s, sid in enumerate(cat.species_ids):
            here = [r for r in recs if g.flat_index(g.locate(r.easting, r.northing)) == flat]
            presence = any(r.species_id == sid for r in here)
            plots_here = {r.plot_id for r in here if r.source == "PA"}
            absence = any(not any(q.plot_id == p and q.species_id == sid for q in recs)
                          for p in plots_here)
            value = occ.values.get(flat, {}).get(s)
            assert (value == 0) == (absence and not presence)
            assert (value == 1) == presence


def test_occurrence_csv_roundtrip(tmp_path):
    recs = [OccurrenceRecord("A", 12.5, 7.25, "2020-01-01", "PO"),
            OccurrenceRecord("", 1.0, 2.0, "", "PA", "plot9")]
    write_occurrences_csv(tmp_path / "o.csv", recs)
    assert read_occurrences_csv(tmp_path / "o.csv") == recs


def test_occupancy_csv_roundtrip(tmp_path):
    recs = [OccurrenceRecord("A", *_at(1, 1), source="PA", plot_id="p"),
            OccurrenceRecord("", *_at(3, 0), source="PA", plot_id="q"),
            OccurrenceRecord("B", *_at(5, 5))]
    occ = target_group_filter(aggregate_to_grid(recs, GRID, CAT))
    write_occupancy_csv(tmp_path / "occ.csv", occ, CAT)
    back = read_occupancy_csv(tmp_path / "occ.csv", GRID, CAT)
    assert np.array_equal(back.cells, occ.cells)
    assert back.values == occ.values
    assert np.array_equal(back.label_matrix(), occ.label_matrix())


# -- spatial blocks -------------------------------------------------------------

def test_block_uniform_frozen_values():
    assert block_uniform(0, 0, 0) == 0.6978145653686135
    assert block_uniform(1, 0, 0) == 0.932759856977332
    assert block_uniform(0, 1, 0) == 0.9655433524115177
    assert block_uniform(1, 1, 0) == 0.18024161064463662


def test_four_block_assignment():
    # u = 0.698 -> val, 0.933 -> test, 0.966 -> test, 0.180 -> train
    s = split_spatial_blocks(GridSpec(0, 0, 4, 4, 50), 100, (0.5, 0.25, 0.25), seed=0)
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [2, 2, 0, 0], [2, 2, 0, 0]])
    assert np.array_equal(s.folds, expected)
    assert s.fold_of(CellIndex(3, 3)) == "train"


def test_all_train_fractions():
    s = split_spatial_blocks(GRID, 100, (1, 0, 0), seed=5)
    assert np.all(s.folds == 0)


@pytest.mark.parametrize("fr", [(0.5, 0.5, 0.1), (1.2, -0.1, -0.1), (0.5, 0.5)])
def test_invalid_fractions(fr):
    with pytest.raises(ValueError):
        split_spatial_blocks(GRID, 100, fr)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_blocks_never_leak(seed):
    g = GridSpec(0, 0, 23, 17, 50)
    s = split_spatial_blocks(g, 250, (0.4, 0.3, 0.3), seed)
    blocks = (np.arange(17)[:, None] // 5) * 100 + np.arange(23)[None, :] // 5
    for b in np.unique(blocks):
        assert np.unique(s.folds[blocks == b]).size == 1
    again = split_spatial_blocks(g, 250, (0.4, 0.3, 0.3), seed)
    assert s.folds.tobytes() == again.folds.tobytes()


def test_fold_proportions_large():
    s = split_spatial_blocks(GridSpec(0, 0, 120, 120, 1), 1, (0.7, 0.15, 0.15), seed=11)
    frac = np.bincount(s.folds.ravel(), minlength=3) / s.folds.size
    assert np.all(np.abs(frac - [0.7, 0.15, 0.15]) <= 0.02)
    assert sorted(np.concatenate([s.cells_in(f) for f in FOLDS]).tolist()) == list(range(14400))
