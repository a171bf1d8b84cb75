"""Evaluation metrics: AUC, F-score, Recall@K, habitat accuracy, coverage."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from biomap.calibrate import ThresholdSet, presence_mask
from biomap.geogrid import cell_center
from biomap.habitat import RankedAssemblage, rank_species


def auc(scores, labels):
    """Rank-based ROC AUC with ties counted as one half; None for single-class input."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fscore(pred_set, truth_set) -> float:
    """F1 of two species sets; two empty sets score 1."""
    pred_set, truth_set = set(pred_set), set(truth_set)
    denom = len(pred_set) + len(truth_set)
    if denom == 0:
        return 1.0
    return 2.0 * len(pred_set & truth_set) / denom


def recall_at_k(ranked, truth_set, k: int) -> float:
    truth_set = set(truth_set)
    if not truth_set:
        raise ValueError("recall@k needs a non-empty truth set")
    if k < 1:
        raise ValueError("k must be >= 1")
    species = ranked.species.tolist() if isinstance(ranked, RankedAssemblage) else list(ranked)
    top = set(species[:k])
    return len(top & truth_set) / len(truth_set)


def habitat_accuracy(preds, truths, level: int) -> float:
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise ValueError("need at least one plot")
    if level not in (1, 2, 3):
        raise ValueError("level must be 1, 2 or 3")
    hits = sum(str(p)[:level] == str(t)[:level] for p, t in zip(preds, truths))
    return hits / len(preds)


@dataclass
class EvalPlot:
    plot_id: str
    cell: object
    probs: np.ndarray
    truth: np.ndarray  # binary, catalog length

    @property
    def truth_set(self) -> set:
        return set(np.flatnonzero(self.truth).tolist())


def mean_fscore(plots, thresholds: ThresholdSet) -> float:
    if not plots:
        raise ValueError("need at least one plot")
    vals = [fscore(np.flatnonzero(presence_mask(p.probs, thresholds)).tolist(), p.truth_set)
            for p in plots]
    return float(np.mean(vals))


def micro_auc(plots):
    return auc(np.concatenate([p.probs for p in plots]), np.concatenate([p.truth for p in plots]))


def macro_auc(plots):
    """Mean per-species AUC over species with both classes present."""
    probs = np.stack([p.probs for p in plots])
    truth = np.stack([p.truth for p in plots])
    vals = [auc(probs[:, s], truth[:, s]) for s in range(probs.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def mean_recall_at_k(plots, k: int):
    vals = [recall_at_k(rank_species(p.probs), p.truth_set, k) for p in plots if p.truth_set]
    return float(np.mean(vals)) if vals else None


@dataclass
class CoverageStat:
    cell_count: int
    fraction: float
    area_m2: float


def coverage_statistics(counts, n_terrestrial: int, cell_size: float = 50.0):
    """Per-species presence cell count, land fraction and area.

    ``counts`` maps species to either a cell count or a boolean presence map.
    """
    if n_terrestrial <= 0:
        raise ValueError("n_terrestrial must be positive")
    out = {}
    for key, v in dict(counts).items():
        c = int(np.count_nonzero(v)) if np.ndim(v) else v
        out[key] = CoverageStat(c, c / n_terrestrial, c * cell_size * cell_size)
    return out


@dataclass
class MetricReport:
    auc: float | None = None
    fscore: float | None = None
    recall_at_50: float | None = None
    recall_at_250: float | None = None
    macro_auc: float | None = None
    habitat_accuracy: dict = field(default_factory=dict)  # "Level 1" -> value
    n_plots: int = 0

    def to_json(self) -> dict:
        return {
            "AUC": self.auc,
            "AUC (macro)": self.macro_auc,
            "F-score": self.fscore,
            "Recall@50": self.recall_at_50,
            "Recall@250": self.recall_at_250,
            "habitat_accuracy": dict(self.habitat_accuracy),
            "n_plots": self.n_plots,
        }


def evaluate_sdm(plots, thresholds: ThresholdSet) -> MetricReport:
    return MetricReport(
        auc=micro_auc(plots),
        fscore=mean_fscore(plots, thresholds),
        recall_at_50=mean_recall_at_k(plots, 50),
        recall_at_250=mean_recall_at_k(plots, 250),
        macro_auc=macro_auc(plots),
        n_plots=len(plots),
    )


def habitat_report(preds, truths) -> dict:
    return {f"Level {lv}": habitat_accuracy(preds, truths, lv) for lv in (1, 2, 3)}


def write_report(path, report: MetricReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)


def read_eval_plots_csv(path, grid, catalog):
    """``plot_id,easting,northing,truth_species`` with ``;``-separated truth ids.

    Returns ``[(plot_id, CellIndex, truth vector)]``; plots outside the grid are
    skipped.
    """
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cell = grid.locate(float(row["easting"]), float(row["northing"]))
            if cell is None:
                continue
            truth = np.zeros(len(catalog), dtype=np.uint8)
            for sid in filter(None, (row.get("truth_species") or "").split(";")):
                truth[catalog.index[sid]] = 1
            out.append((row["plot_id"], cell, truth))
    return out


def write_eval_plots_csv(path, rows, grid, catalog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["plot_id", "easting", "northing", "truth_species"])
        for pid, cell, truth in rows:
            x, y = cell_center(grid, cell)
            w.writerow([pid, repr(float(x)), repr(float(y)),
                        ";".join(catalog.species_ids[s] for s in np.flatnonzero(truth))])
