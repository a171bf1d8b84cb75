"""EUNIS habitat classification from probability-ranked species assemblages."""

import csv
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from biomap import kernels
from biomap.calibrate import ThresholdSet, presence_mask

DEFAULT_TOP_K = 100
DEFAULT_SMOOTHING = 1.0
_CODE_RE = re.compile(r"^[A-Z][0-9A-Z]{0,2}$")


@dataclass(frozen=True)
class EunisCode:
    code: str

    def __post_init__(self):
        if not isinstance(self.code, str) or not _CODE_RE.match(self.code):
            raise ValueError(f"malformed EUNIS code {self.code!r}")

    @property
    def level(self) -> int:
        return len(self.code)

    def __str__(self):
        return self.code


@dataclass
class RankedAssemblage:
    species: np.ndarray  # catalog indices, descending probability
    probabilities: np.ndarray

    def __len__(self):
        return len(self.species)


def rank_species(p, thresholds: ThresholdSet | None = None) -> RankedAssemblage:
    """Present species ordered by descending probability, ties by ascending index.

    With ``thresholds=None`` every species is ranked.
    """
    p = np.asarray(p, dtype=np.float64)
    idx = np.arange(p.size) if thresholds is None else np.flatnonzero(presence_mask(p, thresholds))
    order = idx[np.lexsort((idx, -p[idx]))]
    return RankedAssemblage(order, p[order])


def truncate_top_k(assemblage: RankedAssemblage, k: int) -> RankedAssemblage:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return RankedAssemblage(assemblage.species[:k], assemblage.probabilities[:k])


class HabitatClassifier(Protocol):
    """Anything that scores habitats from a set of species indices."""

    classes: list[str]

    def score(self, species: np.ndarray) -> np.ndarray: ...


class HabitatModel:
    """Smoothed-incidence classifier over species sets.

    Per habitat it keeps the class frequency and, per species, the fraction
    of the habitat's plots containing it. Rates are smoothed additively in
    frequency units, ``(f + a) / (1 + 2a)``, so duplicating the training set
    leaves the model unchanged. A plot scores ``log prior + sum log rate``
    over the species it contains, summed in ascending species order.
    """

    def __init__(self, classes, log_prior, log_rates, smoothing=DEFAULT_SMOOTHING):
        self.classes = list(classes)
        self.log_prior = np.asarray(log_prior, dtype=np.float64)
        self.log_rates = np.ascontiguousarray(log_rates, dtype=np.float64)
        self.smoothing = smoothing
        if not self.classes:
            raise ValueError("habitat model needs at least one class")
        if self.classes != sorted(self.classes):
            raise ValueError("classes must be sorted")

    @property
    def n_species(self) -> int:
        return self.log_rates.shape[1]

    def score(self, species) -> np.ndarray:
        present = np.zeros((1, self.n_species), dtype=np.uint8)
        present[0, np.asarray(species, dtype=np.int64)] = 1
        return kernels.habitat_scores(present, self.log_rates, self.log_prior)[0]

    def score_masks(self, present) -> np.ndarray:
        return kernels.habitat_scores(present, self.log_rates, self.log_prior)


def train_standin(plots, n_species: int, smoothing: float = DEFAULT_SMOOTHING) -> HabitatModel:
    """Fit the stand-in classifier on ``(species indices, level-3 code)`` pairs."""
    counts = defaultdict(lambda: np.zeros(n_species, dtype=np.int64))
    n_plots = defaultdict(int)
    for species, code in plots:
        code = str(code)
        EunisCode(code)
        if len(code) != 3:
            raise ValueError(f"training label {code!r} is not a level-3 code")
        species = set(int(s) for s in species)
        if not species:
            raise ValueError("training plots need non-empty species sets")
        counts[code][sorted(species)] += 1
        n_plots[code] += 1
    if len(n_plots) < 2:
        raise ValueError("need at least two distinct habitat labels")
    classes = sorted(n_plots)
    total = sum(n_plots.values())
    log_prior = np.log([n_plots[c] / total for c in classes])
    freq = np.stack([counts[c] / n_plots[c] for c in classes])
    log_rates = np.log((freq + smoothing) / (1.0 + 2.0 * smoothing))
    return HabitatModel(classes, log_prior, log_rates, smoothing)


def _argmax_first(scores: np.ndarray) -> np.ndarray:
    # classes are sorted, so the first maximum is the lexicographically smallest code
    return np.argmax(scores, axis=-1)


def classify(assemblage: RankedAssemblage, model, k: int = DEFAULT_TOP_K):
    """Most probable level-3 habitat from the top-``k`` species, with its score."""
    top = truncate_top_k(assemblage, k)
    scores = np.asarray(model.score(np.sort(top.species)))
    best = int(_argmax_first(scores))
    return model.classes[best], float(scores[best])


def load_hierarchy(path) -> dict:
    """``level3,level2,level1`` CSV into ``{level3: (level1, level2)}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["level3"].strip()] = (row["level1"].strip(), row["level2"].strip())
    return out


def rollup(code, hierarchy: dict | None = None) -> tuple[str, str]:
    """Level-1 and level-2 parents of a level-3 code (prefixes unless overridden)."""
    code = str(code)
    if hierarchy is not None and code in hierarchy:
        return hierarchy[code]
    c = EunisCode(code)
    if c.level != 3:
        raise ValueError(f"rollup needs a level-3 code, got {code!r}")
    return code[:1], code[:2]


def top_k_masks(probs: np.ndarray, thresholds: ThresholdSet | None, k: int) -> np.ndarray:
    """``(n, S)`` uint8 masks of each row's top-``k`` present species."""
    probs = np.asarray(probs, dtype=np.float64)
    present = np.ones(probs.shape, bool) if thresholds is None else presence_mask(probs, thresholds)
    if k >= probs.shape[1]:
        return present.astype(np.uint8)
    key = np.where(present, -probs, np.inf)
    order = np.argsort(key, axis=1, kind="stable")[:, :k]
    mask = np.zeros(probs.shape, dtype=np.uint8)
    rows = np.arange(probs.shape[0])[:, None]
    mask[rows, order] = np.take_along_axis(present, order, axis=1)
    return mask


def classify_cells(probs: np.ndarray, thresholds, model, k: int = DEFAULT_TOP_K) -> np.ndarray:
    """Class index per row of an ``(n, S)`` probability block."""
    masks = top_k_masks(probs, thresholds, k)
    if isinstance(model, HabitatModel):
        scores = model.score_masks(masks)
    else:
        scores = np.stack([model.score(np.flatnonzero(m)) for m in masks])
    return _argmax_first(scores)


def level_tables(classes, hierarchy: dict | None = None):
    """Sorted class lists for L3, L2, L1 and index maps from L3 into the others."""
    l3 = list(classes)
    parents = [rollup(c, hierarchy) for c in l3]
    l2 = sorted({p[1] for p in parents})
    l1 = sorted({p[0] for p in parents})
    to_l2 = np.array([l2.index(p[1]) for p in parents], dtype=np.int64)
    to_l1 = np.array([l1.index(p[0]) for p in parents], dtype=np.int64)
    return {"L3": l3, "L2": l2, "L1": l1}, to_l2, to_l1


def compute_habitat_map(probs: np.ndarray, thresholds, model, k: int = DEFAULT_TOP_K,
                        hierarchy: dict | None = None):
    """Categorical L3/L2/L1 index layers for a ``(height, width, S)`` cube.

    Returns ``(layers, tables)`` where ``layers[level]`` holds indices into
    ``tables[level]``.
    """
    h, w, s = probs.shape
    l3 = classify_cells(probs.reshape(h * w, s), thresholds, model, k)
    tables, to_l2, to_l1 = level_tables(model.classes, hierarchy)
    layers = {"L3": l3.reshape(h, w), "L2": to_l2[l3].reshape(h, w), "L1": to_l1[l3].reshape(h, w)}
    return layers, tables


def read_labeled_plots(path, catalog):
    """``plot_id,eunis_level3,species_id`` rows into ``[(species indices, code)]``."""
    species = defaultdict(set)
    labels = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pid = row["plot_id"]
            code = row["eunis_level3"].strip()
            if labels.setdefault(pid, code) != code:
                raise ValueError(f"{path}: plot {pid} has conflicting labels")
            if row["species_id"]:
                species[pid].add(catalog.index[row["species_id"]])
    return [(sorted(species[p]), labels[p]) for p in sorted(labels)]


def write_labeled_plots(path, plots, catalog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["plot_id", "eunis_level3", "species_id"])
        for i, (species, code) in enumerate(plots):
            for s in sorted(species):
                w.writerow([f"plot{i:06d}", code, catalog.species_ids[s]])
