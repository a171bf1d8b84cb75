"""Biodiversity indicators from per-cell presence probabilities.

A count indicator over a species subset S is a Poisson-binomial variable:
mean = sum p_i, variance = sum p_i (1 - p_i), half-width = 2 sigma. The
at-least-one probability is 1 - prod (1 - p_i). The most-threatened
indicator takes the max IUCN rank over the thresholded assemblage.
"""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from biomap import kernels
from biomap.calibrate import Assemblage, ThresholdSet
from biomap.occurrence import IUCN_CODES, SpeciesCatalog

IUCN_RANK = {"LC": 0, "NT": 1, "VU": 2, "EN": 3, "CR": 4, "EW": 5, "EX": 6, "NA": -1}
THREATENED = ("VU", "EN", "CR")
KINDS = ("COUNT", "AT_LEAST_ONE", "MAX_STATUS")
STATUS_NODATA = -1
MAX_ORACLE_SIZE = 25
DEFAULT_SPECIALIST_TAU = 0.001


def count_mean(p) -> float:
    acc = 0.0
    for v in p:
        acc += float(v)
    return acc


def count_variance(p) -> float:
    acc = 0.0
    for v in p:
        v = float(v)
        acc += v * (1.0 - v)
    return acc


def confidence_halfwidth(variance: float) -> float:
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    return 2.0 * math.sqrt(variance)


def at_least_one_probability(p) -> float:
    absent = 1.0
    for v in p:
        absent *= 1.0 - float(v)
    return 1.0 - absent


def brute_force_poisson_binomial(p) -> np.ndarray:
    """Exact pmf over counts ``0..len(p)`` by sequential convolution."""
    p = [float(v) for v in p]
    if len(p) > MAX_ORACLE_SIZE:
        raise ValueError(f"oracle limited to {MAX_ORACLE_SIZE} species, got {len(p)}")
    pmf = np.array([1.0])
    for v in p:
        nxt = np.zeros(pmf.size + 1)
        nxt[:-1] += pmf * (1.0 - v)
        nxt[1:] += pmf * v
        pmf = nxt
    return pmf


class IucnStatusTable:
    """Integer status rank per catalog species (NA = -1)."""

    def __init__(self, ranks):
        self.ranks = np.asarray(ranks, dtype=np.int64)
        if np.any((self.ranks < -1) | (self.ranks > 6)):
            raise ValueError("status ranks must be in -1..6")

    @classmethod
    def from_codes(cls, codes) -> "IucnStatusTable":
        return cls([IUCN_RANK[c] for c in codes])

    @classmethod
    def from_catalog(cls, catalog: SpeciesCatalog) -> "IucnStatusTable":
        return cls.from_codes(catalog.iucn_status)

    @classmethod
    def from_csv(cls, path, catalog: SpeciesCatalog) -> "IucnStatusTable":
        """``species_id,iucn_status`` rows; species not listed count as NA."""
        codes = ["NA"] * len(catalog)
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                code = row["iucn_status"].strip().upper()
                if code not in IUCN_CODES:
                    raise ValueError(f"{path}: unknown IUCN status {code!r}")
                codes[catalog.index[row["species_id"]]] = code
        return cls.from_codes(codes)

    def __len__(self):
        return len(self.ranks)


def most_threatened_status(assemblage: Assemblage, table: IucnStatusTable):
    """Max rank over present species with a known status, or None."""
    ranks = table.ranks[np.asarray(assemblage.species, dtype=np.int64)]
    ranks = ranks[ranks >= 0]
    return int(ranks.max()) if ranks.size else None


@dataclass(frozen=True)
class IndicatorDefinition:
    name: str
    kind: str
    species: tuple = ()  # catalog indices (COUNT / AT_LEAST_ONE)
    status_table: IucnStatusTable | None = None  # MAX_STATUS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: kind must be one of {KINDS}")
        if self.kind == "AT_LEAST_ONE" and not self.species:
            raise ValueError(f"{self.name}: AT_LEAST_ONE needs a non-empty species set")
        if self.kind == "MAX_STATUS" and self.status_table is None:
            raise ValueError(f"{self.name}: MAX_STATUS needs a status table")

    @property
    def species_array(self) -> np.ndarray:
        return np.asarray(self.species, dtype=np.int64)


def _attribute_species(attr: str, catalog: SpeciesCatalog, specialists=None) -> tuple:
    n = len(catalog)
    if attr == "all":
        sel = np.ones(n, bool)
    elif attr in ("is_tree", "is_invasive", "eu_directive"):
        sel = getattr(catalog, attr)
    elif attr == "threatened":
        sel = np.array([s in THREATENED for s in catalog.iucn_status])
    elif attr.startswith("iucn:"):
        code = attr.split(":", 1)[1].upper()
        if code not in IUCN_CODES:
            raise ValueError(f"unknown IUCN status in attribute {attr!r}")
        sel = np.array([s == code for s in catalog.iucn_status])
    elif attr == "specialist":
        if specialists is None:
            raise ValueError("specialist species require the occupancy pre-pass")
        sel = np.asarray(specialists, bool)
    else:
        raise ValueError(f"unknown species attribute {attr!r}")
    return tuple(int(i) for i in np.flatnonzero(sel))


def default_config() -> list[dict]:
    """The seven standard indicators, plus P(at least one EN species)."""
    return [
        {"name": "species_richness", "kind": "COUNT", "attribute": "all"},
        {"name": "eu_directive", "kind": "COUNT", "attribute": "eu_directive"},
        {"name": "threatened_species", "kind": "COUNT", "attribute": "threatened"},
        {"name": "most_threatened", "kind": "MAX_STATUS", "status_table": "catalog"},
        {"name": "tree_species", "kind": "COUNT", "attribute": "is_tree"},
        {"name": "invasive_species", "kind": "COUNT", "attribute": "is_invasive"},
        {"name": "specialist_species", "kind": "COUNT", "attribute": "specialist"},
        {"name": "endangered_at_least_one", "kind": "AT_LEAST_ONE", "attribute": "iucn:EN",
         "optional": True},
    ]


def needs_specialists(config: list[dict]) -> bool:
    return any(entry.get("attribute") == "specialist" for entry in config)


def build_definitions(config: list[dict], catalog: SpeciesCatalog, specialists=None):
    """Resolve JSON-style indicator entries against a catalog.

    Each entry has ``name``, ``kind`` and one of ``attribute``, ``species``
    (explicit id list) or ``status_table`` (``"catalog"`` or a CSV path).
    Entries flagged ``optional`` are dropped when their set comes out empty.
    """
    defs, seen = [], set()
    for entry in config:
        name, kind = entry["name"], entry["kind"]
        if name in seen:
            raise ValueError(f"duplicate indicator name {name!r}")
        seen.add(name)
        if kind == "MAX_STATUS":
            src = entry.get("status_table", "catalog")
            table = (IucnStatusTable.from_catalog(catalog) if src == "catalog"
                     else IucnStatusTable.from_csv(src, catalog))
            defs.append(IndicatorDefinition(name, kind, status_table=table))
            continue
        if "species" in entry:
            unknown = [s for s in entry["species"] if s not in catalog]
            if unknown:
                raise ValueError(f"{name}: unknown species ids {unknown}")
            species = tuple(catalog.index[s] for s in entry["species"])
        elif "attribute" in entry:
            species = _attribute_species(entry["attribute"], catalog, specialists)
        else:
            raise ValueError(f"{name}: needs 'attribute', 'species' or 'status_table'")
        if not species and entry.get("optional") and kind == "AT_LEAST_ONE":
            continue
        defs.append(IndicatorDefinition(name, kind, species))
    return defs


def load_indicator_config(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if isinstance(cfg, dict):
        cfg = cfg["indicators"]
    return cfg


def specialist_mask(presence_counts, n_cells: int, tau: float = DEFAULT_SPECIALIST_TAU):
    """Species predicted present somewhere but in less than ``tau`` of cells."""
    counts = np.asarray(presence_counts)
    frac = counts / float(n_cells)
    return (counts > 0) & (frac < tau)


@dataclass
class IndicatorRaster:
    name: str
    kind: str
    layers: dict  # band name -> (height, width) array


def compute_indicator_layers(probs: np.ndarray, definitions, thresholds: ThresholdSet) -> dict:
    """Indicator values for a block of cells.

    ``probs`` is ``(n_cells, S)``; returns ``{name: {band: (n_cells,) array}}``.
    COUNT uses raw probabilities; MAX_STATUS the thresholded assemblage.
    """
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    if probs.shape[1] != len(thresholds):
        raise ValueError("catalog size differs between probabilities and thresholds")
    out = {}
    for d in definitions:
        if d.kind == "COUNT":
            mean, var = kernels.count_moments(probs, d.species_array)
            out[d.name] = {"mean": mean, "halfwidth": 2.0 * np.sqrt(var)}
        elif d.kind == "AT_LEAST_ONE":
            out[d.name] = {"probability": kernels.at_least_one(probs, d.species_array)}
        else:
            ranks = kernels.max_status(probs, thresholds.thresholds, d.status_table.ranks)
            out[d.name] = {"status_rank": ranks}
    return out


def compute_indicator_map(probs: np.ndarray, definitions, thresholds: ThresholdSet):
    """Indicator rasters for a ``(height, width, S)`` probability cube."""
    h, w, s = probs.shape
    flat = compute_indicator_layers(probs.reshape(h * w, s), definitions, thresholds)
    kinds = {d.name: d.kind for d in definitions}
    return [IndicatorRaster(name, kinds[name], {b: v.reshape(h, w) for b, v in bands.items()})
            for name, bands in flat.items()]


def band_names(kind: str) -> list[str]:
    return {"COUNT": ["mean", "halfwidth"], "AT_LEAST_ONE": ["probability"],
            "MAX_STATUS": ["status_rank"]}[kind]
