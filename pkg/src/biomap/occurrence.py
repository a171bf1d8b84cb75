"""Occurrence ingestion: catalog, PO/PA records, site occupancy, block splits."""

import csv
import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from biomap.geogrid import CellIndex, GridSpec, TerrestrialMask, _cells_per

log = logging.getLogger(__name__)

IUCN_CODES = ("LC", "NT", "VU", "EN", "CR", "EW", "EX", "NA")
FOLDS = ("train", "val", "test")


def _flag(value: str) -> bool:
    return str(value).strip().lower() in {"1", "true", "yes", "y", "t"}


class SpeciesCatalog:
    """Ordered species ids with dense indices and optional attributes."""

    def __init__(self, species_ids, is_tree=None, is_invasive=None, eu_directive=None,
                 iucn_status=None):
        self.species_ids = [str(s) for s in species_ids]
        self.index = {sid: i for i, sid in enumerate(self.species_ids)}
        if len(self.index) != len(self.species_ids):
            raise ValueError("duplicate species ids in catalog")
        n = len(self.species_ids)

        def _attr(vals, default):
            if vals is None:
                return np.full(n, default)
            vals = np.asarray(vals)
            if len(vals) != n:
                raise ValueError("attribute length does not match catalog size")
            return vals

        self.is_tree = _attr(is_tree, False).astype(bool)
        self.is_invasive = _attr(is_invasive, False).astype(bool)
        self.eu_directive = _attr(eu_directive, False).astype(bool)
        status = list(_attr(iucn_status, "NA"))
        for s in status:
            if s not in IUCN_CODES:
                raise ValueError(f"unknown IUCN status {s!r}")
        self.iucn_status = status

    def __len__(self):
        return len(self.species_ids)

    def __contains__(self, sid):
        return sid in self.index

    @classmethod
    def from_csv(cls, path) -> "SpeciesCatalog":
        ids, tree, inv, eu, iucn = [], [], [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                ids.append(row["species_id"])
                tree.append(_flag(row.get("is_tree", "")))
                inv.append(_flag(row.get("is_invasive", "")))
                eu.append(_flag(row.get("eu_directive", "")))
                iucn.append((row.get("iucn_status") or "NA").strip().upper())
        return cls(ids, tree, inv, eu, iucn)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["species_id", "is_tree", "is_invasive", "eu_directive", "iucn_status"])
            for i, sid in enumerate(self.species_ids):
                w.writerow([sid, int(self.is_tree[i]), int(self.is_invasive[i]),
                            int(self.eu_directive[i]), self.iucn_status[i]])


@dataclass(frozen=True)
class OccurrenceRecord:
    species_id: str
    easting: float
    northing: float
    observed_date: str = ""
    source: str = "PO"
    plot_id: str | None = None

    def __post_init__(self):
        if self.source not in ("PO", "PA"):
            raise ValueError(f"source must be PO or PA, got {self.source!r}")
        if self.source == "PA" and not self.plot_id:
            raise ValueError("PA record requires a plot_id")


def read_occurrences_csv(path) -> list[OccurrenceRecord]:
    """Read ``species_id,easting,northing,date,source,plot_id`` rows.

    A PA row with an empty ``species_id`` marks a surveyed plot where no
    species was found.
    """
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(OccurrenceRecord(
                species_id=row["species_id"].strip(),
                easting=float(row["easting"]),
                northing=float(row["northing"]),
                observed_date=row.get("date", "") or "",
                source=row["source"].strip().upper(),
                plot_id=(row.get("plot_id") or "").strip() or None,
            ))
    return out


def write_occurrences_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["species_id", "easting", "northing", "date", "source", "plot_id"])
        for r in records:
            w.writerow([r.species_id, repr(float(r.easting)), repr(float(r.northing)), r.observed_date,
                        r.source, r.plot_id or ""])


@dataclass
class AggregationReport:
    n_records: int = 0
    out_of_extent: int = 0
    relocated: int = 0
    unknown_species: dict = field(default_factory=dict)  # species_id -> count


@dataclass
class SiteOccupancy:
    """Per-cell sparse binary species vectors.

    ``cells`` lists the flat indices covered (all grid cells before
    filtering); ``values[cell][species] in {0, 1}`` holds explicit entries and
    ``record_count[cell]`` the number of records that touched the cell.
    """

    grid: GridSpec
    n_species: int
    cells: np.ndarray
    values: dict = field(default_factory=dict)
    record_count: dict = field(default_factory=dict)
    report: AggregationReport = field(default_factory=AggregationReport)

    def has_any_record(self, flat: int) -> bool:
        return self.record_count.get(int(flat), 0) > 0

    def vector(self, flat: int) -> np.ndarray:
        """Dense label vector; unset species read as 0."""
        y = np.zeros(self.n_species, dtype=np.uint8)
        for s, v in self.values.get(int(flat), {}).items():
            y[s] = v
        return y

    def label_matrix(self, cells=None) -> np.ndarray:
        cells = self.cells if cells is None else cells
        return np.stack([self.vector(c) for c in cells]) if len(cells) else \
            np.zeros((0, self.n_species), dtype=np.uint8)

    def __eq__(self, other):
        if not isinstance(other, SiteOccupancy):
            return NotImplemented
        return (self.grid == other.grid and self.n_species == other.n_species
                and np.array_equal(self.cells, other.cells) and self.values == other.values
                and self.record_count == other.record_count)


def aggregate_to_grid(records, grid: GridSpec, catalog: SpeciesCatalog,
                      mask: TerrestrialMask | None = None) -> SiteOccupancy:
    """Aggregate PO/PA records into a per-cell presence/absence grid.

    Records in water cells are moved to the nearest land cell. A PA plot marks
    every catalog species it does not list as absent in each cell it touches;
    any presence for a cell/species beats any absence.
    """
    report = AggregationReport()
    presences = defaultdict(set)
    counts = defaultdict(int)
    plot_cells = defaultdict(set)
    plot_species = defaultdict(set)
    table = mask.relocation_table() if mask is not None else None

    for rec in records:
        report.n_records += 1
        if rec.species_id and rec.species_id not in catalog:
            report.unknown_species[rec.species_id] = report.unknown_species.get(rec.species_id, 0) + 1
            continue
        if not rec.species_id and rec.source != "PA":
            report.unknown_species[""] = report.unknown_species.get("", 0) + 1
            continue
        cell = grid.locate(rec.easting, rec.northing)
        if cell is None:
            report.out_of_extent += 1
            continue
        flat = grid.flat_index(cell)
        if table is not None and table[flat] != flat:
            flat = int(table[flat])
            report.relocated += 1
        counts[flat] += 1
        if rec.source == "PA":
            plot_cells[rec.plot_id].add(flat)
            if rec.species_id:
                plot_species[rec.plot_id].add(catalog.index[rec.species_id])
        if rec.species_id:
            presences[flat].add(catalog.index[rec.species_id])

    if report.unknown_species:
        log.warning("rejected %d record(s) with unknown species ids",
                    sum(report.unknown_species.values()))

    absences = defaultdict(set)
    all_species = set(range(len(catalog)))
    for plot, cells in plot_cells.items():
        missing = all_species - plot_species[plot]
        for flat in cells:
            absences[flat] |= missing

    values = {}
    for flat in sorted(set(presences) | set(absences)):
        entry = {s: 0 for s in absences.get(flat, ())}
        entry.update({s: 1 for s in presences.get(flat, ())})
        values[flat] = dict(sorted(entry.items()))

    return SiteOccupancy(grid, len(catalog), np.arange(grid.n_cells, dtype=np.int64), values,
                         dict(sorted(counts.items())), report)


def target_group_filter(occupancy: SiteOccupancy) -> SiteOccupancy:
    """Keep only cells with at least one record (presence or explicit absence)."""
    keep = np.array([c for c in occupancy.cells if occupancy.has_any_record(c)], dtype=np.int64)
    kept = set(keep.tolist())
    values = {c: v for c, v in occupancy.values.items() if c in kept}
    return SiteOccupancy(occupancy.grid, occupancy.n_species, keep, values,
                         dict(occupancy.record_count), occupancy.report)


def read_occupancy_csv(path, grid: GridSpec, catalog: SpeciesCatalog) -> SiteOccupancy:
    """Read ``col,row,species_id,value`` rows written by :func:`write_occupancy_csv`."""
    values = defaultdict(dict)
    counts = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            flat = grid.flat_index(CellIndex(int(row["col"]), int(row["row"])))
            counts[flat] = counts.get(flat, 0) + 1
            if row["species_id"]:
                values[flat][catalog.index[row["species_id"]]] = int(row["value"])
    cells = np.array(sorted(counts), dtype=np.int64)
    return SiteOccupancy(grid, len(catalog), cells,
                         {c: dict(sorted(v.items())) for c, v in sorted(values.items())}, counts)


def write_occupancy_csv(path, occupancy: SiteOccupancy, catalog: SpeciesCatalog) -> None:
    grid = occupancy.grid
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["col", "row", "species_id", "value"])
        for flat in occupancy.cells:
            if not occupancy.has_any_record(flat):
                continue
            cell = grid.cell_at(flat)
            entries = occupancy.values.get(int(flat), {})
            if not entries:
                w.writerow([cell.col, cell.row, "", ""])
            for s, v in entries.items():
                w.writerow([cell.col, cell.row, catalog.species_ids[s], v])


# -- spatial block split ---------------------------------------------------

def block_uniform(block_col: int, block_row: int, seed: int) -> float:
    """Deterministic uniform draw in [0, 1) for one block.

    First 8 bytes (big-endian) of BLAKE2b over ``"{block_col}:{block_row}:{seed}"``,
    divided by 2**64.
    """
    digest = hashlib.blake2b(f"{block_col}:{block_row}:{seed}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0 ** 64


@dataclass(frozen=True)
class SplitAssignment:
    grid: GridSpec
    block_size_m: float
    folds: np.ndarray  # (height, width) uint8 codes into FOLDS

    def fold_of(self, cell: CellIndex) -> str:
        return FOLDS[self.folds[cell.row, cell.col]]

    def cells_in(self, fold: str) -> np.ndarray:
        return np.flatnonzero(self.folds.ravel() == FOLDS.index(fold))


def split_spatial_blocks(grid: GridSpec, block_size_m: float = 10_000.0,
                         fractions=(0.7, 0.15, 0.15), seed: int = 0) -> SplitAssignment:
    """Assign each square block of ``block_size_m`` to train/val/test by seeded hash."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    side = _cells_per(block_size_m, grid.cell_size, "block size")
    n_bc = -(-grid.width // side)
    n_br = -(-grid.height // side)
    cut_train, cut_val = fr[0], fr[0] + fr[1]
    codes = np.empty((n_br, n_bc), dtype=np.uint8)
    for br in range(n_br):
        for bc in range(n_bc):
            u = block_uniform(bc, br, seed)
            codes[br, bc] = 0 if u < cut_train else (1 if u < cut_val else 2)
    rows = np.arange(grid.height) // side
    cols = np.arange(grid.width) // side
    folds = codes[rows[:, None], cols[None, :]]
    return SplitAssignment(grid, float(block_size_m), np.ascontiguousarray(folds))
