"""Presence thresholds: global F-score optimum or per-species conformal bounds.

A species is present when ``p >= t``. The ``NEVER`` sentinel is stored as
``+inf`` so that comparison is simply false.
"""

import csv
import json
import math
from dataclasses import dataclass
from decimal import Decimal

import numpy as np

NEVER = math.inf
MODES = ("global_fscore", "conformal")


@dataclass
class ThresholdSet:
    mode: str
    thresholds: np.ndarray  # per species; +inf = NEVER
    alpha: float | None = None
    global_threshold: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        t = np.asarray(self.thresholds, dtype=np.float64)
        finite = t[np.isfinite(t)]
        if np.any(np.isnan(t)) or np.any(t == -np.inf) or np.any((finite < 0) | (finite > 1)):
            raise ValueError("thresholds must lie in [0, 1] or be NEVER")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        self.thresholds = t

    def __len__(self):
        return len(self.thresholds)

    @classmethod
    def global_(cls, t: float, n_species: int) -> "ThresholdSet":
        return cls("global_fscore", np.full(n_species, float(t)), global_threshold=float(t))


@dataclass
class Assemblage:
    cell: object
    species: np.ndarray  # catalog indices, ascending
    probabilities: np.ndarray

    def __len__(self):
        return len(self.species)

    @property
    def species_set(self) -> set:
        return set(self.species.tolist())


def _f1_rows(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    tp = np.count_nonzero(pred & truth, axis=1)
    denom = np.count_nonzero(pred, axis=1) + np.count_nonzero(truth, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(denom == 0, 1.0, 2.0 * tp / np.maximum(denom, 1))
    return f


def threshold_candidates(probs) -> np.ndarray:
    return np.unique(np.concatenate([np.asarray(probs, dtype=np.float64).ravel(), [0.0, 1.0]]))


def scan_fscore(val_probs, val_truth):
    """Mean per-plot F1 for every candidate threshold; returns (candidates, scores)."""
    probs = np.asarray(val_probs, dtype=np.float64)
    truth = np.asarray(val_truth).astype(bool)
    if probs.ndim == 1:
        probs, truth = probs[None], truth[None]
    if probs.shape != truth.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {truth.shape}")
    cands = threshold_candidates(probs)
    scores = np.array([_f1_rows(probs >= t, truth).mean() for t in cands])
    return cands, scores


def fit_fscore_threshold(val_probs, val_truth) -> ThresholdSet:
    """Single threshold maximizing mean per-plot F1 on validation plots.

    Candidates are the distinct predicted probabilities plus 0 and 1. Among
    tied maxima the smallest threshold wins, where 0 counts as the smallest
    observed probability (both select exactly the same species).
    """
    probs = np.asarray(val_probs, dtype=np.float64)
    truth = np.asarray(val_truth)
    if probs.size == 0:
        raise ValueError("need at least one validation plot")
    if not np.any(truth):
        raise ValueError("validation truth has no presences; F-score undefined")
    cands, scores = scan_fscore(probs, truth)
    lowest = probs.min()
    best_t, best = None, -1.0
    for t, s in zip(cands, scores):
        if t == 0.0 and lowest > 0.0:
            continue  # same selection as t = lowest, which is scanned next
        if s > best:
            best_t, best = t, s
    n = probs.shape[-1]
    return ThresholdSet.global_(float(best_t), n)


def _order_stat_rank(alpha: float, n: int) -> int:
    # decimal arithmetic so that e.g. alpha=0.29, n=99 gives 29, not 28
    return int((Decimal(repr(float(alpha))) * (n + 1)).to_integral_value(rounding="ROUND_FLOOR"))


def fit_conformal_thresholds(cal_probs, cal_truth, alpha: float) -> ThresholdSet:
    """Per-species split-conformal lower thresholds.

    For species with ``n >= 1`` calibration presences, ``t`` is the k-th
    smallest presence-site score with ``k = floor(alpha * (n + 1))`` (``k = 0``
    gives ``t = 0``). Species never present in calibration get ``NEVER``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    probs = np.asarray(cal_probs, dtype=np.float64)
    truth = np.asarray(cal_truth).astype(bool)
    if probs.ndim == 1:
        probs, truth = probs[None], truth[None]
    if probs.shape != truth.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {truth.shape}")
    t = np.full(probs.shape[1], NEVER)
    for s in range(probs.shape[1]):
        scores = np.sort(probs[truth[:, s], s])
        if scores.size == 0:
            continue
        k = _order_stat_rank(alpha, scores.size)
        t[s] = 0.0 if k == 0 else scores[k - 1]
    return ThresholdSet("conformal", t, alpha=float(alpha))


def presence_mask(probs, thresholds: ThresholdSet) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != len(thresholds):
        raise ValueError(f"{probs.shape[-1]} probabilities vs {len(thresholds)} thresholds")
    return probs >= thresholds.thresholds


def apply_thresholds(probs, thresholds: ThresholdSet, cell=None) -> Assemblage:
    probs = np.asarray(probs, dtype=np.float64)
    keep = np.flatnonzero(presence_mask(probs, thresholds))
    return Assemblage(cell, keep, probs[keep].copy())


# -- file format --------------------------------------------------------------

def write_thresholds(path, thresholds: ThresholdSet, species_ids) -> None:
    """CSV ``species_id,threshold`` preceded by a ``# {json}`` header line."""
    if len(species_ids) != len(thresholds):
        raise ValueError("species_ids length does not match thresholds")
    meta = {"mode": thresholds.mode, "alpha": thresholds.alpha,
            "global_threshold": thresholds.global_threshold}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(meta) + "\n")
        w = csv.writer(fh)
        w.writerow(["species_id", "threshold"])
        for sid, t in zip(species_ids, thresholds.thresholds):
            w.writerow([sid, "NEVER" if math.isinf(t) else repr(float(t))])


def read_thresholds(path, catalog=None):
    """Return ``(ThresholdSet, species_ids)``; reordered to ``catalog`` if given."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing '# {{json}}' header line")
        meta = json.loads(first[1:])
        rows = list(csv.DictReader(fh))
    ids = [r["species_id"] for r in rows]
    vals = [NEVER if r["threshold"].strip().upper() == "NEVER" else float(r["threshold"])
            for r in rows]
    if catalog is not None:
        lookup = dict(zip(ids, vals))
        missing = [s for s in catalog.species_ids if s not in lookup]
        if missing:
            raise ValueError(f"{path}: no threshold for species {missing[:5]}")
        ids = list(catalog.species_ids)
        vals = [lookup[s] for s in ids]
    ts = ThresholdSet(meta["mode"], np.array(vals, dtype=np.float64), meta.get("alpha"),
                      meta.get("global_threshold"))
    return ts, ids
