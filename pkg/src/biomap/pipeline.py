"""Tile-parallel orchestration of the species, indicator and habitat map products.

Workers compute one meta-tile at a time from shared immutable inputs and
stage the result as an ``.npz`` file; only after every tile succeeded does
the coordinator assemble the final rasters (serially, in tile order) and
rename them into place. A failed run moves its staging area to
``<out>/quarantine/`` and commits nothing.
"""

import json
import logging
import os
import shutil
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from biomap import calibrate, habitat, indicators, sdm
from biomap.geogrid import DEFAULT_TILE_SIZE, GridSpec, MetaTile, TerrestrialMask, make_tiling
from biomap.occurrence import SpeciesCatalog
from biomap.raster import RasterWriter, raster_read

log = logging.getLogger(__name__)

WORKERS_ENV = "ATLAS_WORKERS"


class ConfigError(ValueError):
    """Invalid or unreadable pipeline inputs, detected before any work starts."""


class TileFailure(RuntimeError):
    def __init__(self, failures, quarantine):
        self.failures = failures  # [(tile name, traceback text)]
        self.quarantine = quarantine
        names = ", ".join(name for name, _ in failures)
        super().__init__(f"{len(failures)} tile(s) failed ({names}); staging moved to {quarantine}")


@dataclass
class PipelineConfig:
    grid: GridSpec
    out_dir: Path
    tile_size_m: float = DEFAULT_TILE_SIZE
    workers: int = 1
    seed: int = 0
    paths: dict = field(default_factory=dict)
    threshold_mode: str = "conformal"
    alpha: float = 0.1
    top_k: int = habitat.DEFAULT_TOP_K
    block_size_m: float = 10_000.0
    fractions: tuple = (0.7, 0.15, 0.15)
    train: dict = field(default_factory=dict)
    specialist_tau: float = indicators.DEFAULT_SPECIALIST_TAU

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.threshold_mode not in calibrate.MODES:
            raise ConfigError(f"threshold_mode must be one of {calibrate.MODES}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        self.out_dir = Path(self.out_dir)

    def path(self, key: str, required: bool = True):
        p = self.paths.get(key)
        if p is None:
            if required:
                raise ConfigError(f"config is missing paths.{key}")
            return None
        if isinstance(p, dict):
            return {k: Path(v) for k, v in p.items()}
        return Path(p)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        base = Path(base_dir)

        def _resolve(v):
            if isinstance(v, dict):
                return {k: _resolve(x) for k, x in v.items()}
            return str(base / v) if v is not None else None

        if "grid" not in d:
            raise ConfigError("config is missing 'grid'")
        try:
            grid = GridSpec.from_dict(d["grid"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid grid: {exc}")
        known = {"tile_size_m", "workers", "seed", "threshold_mode", "alpha", "top_k",
                 "block_size_m", "fractions", "train", "specialist_tau"}
        extra = {k: d[k] for k in known if k in d}
        if "fractions" in extra:
            extra["fractions"] = tuple(extra["fractions"])
        return cls(grid=grid, out_dir=base / d.get("out_dir", "out"),
                   paths={k: _resolve(v) for k, v in d.get("paths", {}).items()}, **extra)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(), "out_dir": str(self.out_dir),
            "tile_size_m": self.tile_size_m, "workers": self.workers, "seed": self.seed,
            "paths": {k: (v if not isinstance(v, dict) else dict(v)) for k, v in self.paths.items()},
            "threshold_mode": self.threshold_mode, "alpha": self.alpha, "top_k": self.top_k,
            "block_size_m": self.block_size_m, "fractions": list(self.fractions),
            "train": dict(self.train), "specialist_tau": self.specialist_tau,
        }


def resolve_workers(cli_value=None, config_value=1) -> int:
    """``ATLAS_WORKERS`` beats ``--workers`` beats the config file."""
    env = os.environ.get(WORKERS_ENV)
    value = env if env else (cli_value if cli_value is not None else config_value)
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid worker count {value!r}")
    if n < 1:
        raise ConfigError(f"worker count must be >= 1, got {n}")
    return n


# -- scheduling ----------------------------------------------------------------

_CONTEXT = None


def _init_worker(context):
    global _CONTEXT
    _CONTEXT = context


def _stage_tile(task, context, tile: MetaTile, staging: Path) -> Path:
    result = task(context, tile)
    final = staging / f"{tile.name}.npz"
    tmp = staging / f".{tile.name}.tmp.npz"
    np.savez(tmp, **result)
    os.replace(tmp, final)
    return final


def _run_in_worker(task, tile, staging):
    return _stage_tile(task, _CONTEXT, tile, staging)


def _quarantine(staging: Path, out_dir: Path, failures) -> Path:
    qroot = out_dir / "quarantine"
    qroot.mkdir(parents=True, exist_ok=True)
    target = qroot / f"{staging.name}-{time.strftime('%Y%m%dT%H%M%S')}-{os.getpid()}"
    shutil.move(str(staging), target)
    with open(target / "failures.json", "w", encoding="utf-8") as fh:
        json.dump([{"tile": n, "error": e} for n, e in failures], fh, indent=2)
    return target


def schedule_tiles(tiles, worker_count: int, task, context, staging: Path, out_dir: Path):
    """Run ``task(context, tile) -> {name: array}`` over tiles; returns staged paths.

    Results are keyed by tile, so completion order never affects the output.
    Every submitted tile is drained before a failure is reported.
    """
    staging = Path(staging)
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    staged, failures = {}, []
    if worker_count == 1 or len(tiles) == 1:
        for tile in tiles:
            try:
                staged[tile] = _stage_tile(task, context, tile, staging)
            except Exception:
                failures.append((tile.name, traceback.format_exc()))
    else:
        with ProcessPoolExecutor(max_workers=worker_count, initializer=_init_worker,
                                 initargs=(context,)) as pool:
            futures = {pool.submit(_run_in_worker, task, t, staging): t for t in tiles}
            wait(futures)
            for fut, tile in futures.items():
                exc = fut.exception()
                if exc is None:
                    staged[tile] = fut.result()
                else:
                    failures.append((tile.name, "".join(
                        traceback.format_exception(type(exc), exc, exc.__traceback__))))
    if failures:
        failures.sort()
        raise TileFailure(failures, _quarantine(staging, out_dir, failures))
    return [staged[t] for t in tiles]


# -- inputs ------------------------------------------------------------------------

def load_catalog(config: PipelineConfig) -> SpeciesCatalog:
    try:
        return SpeciesCatalog.from_csv(config.path("catalog"))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load catalog: {exc}")


def load_mask(config: PipelineConfig) -> TerrestrialMask | None:
    p = config.path("mask", required=False)
    if p is None:
        return None
    try:
        r = raster_read(p)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load mask: {exc}")
    if r.grid != config.grid:
        raise ConfigError(f"mask grid {r.grid} differs from configured grid {config.grid}")
    mask = TerrestrialMask(r.data[0] == 1, config.grid)
    if mask.n_land == 0:
        raise ConfigError("mask contains no terrestrial cell")
    return mask


def load_predictor(config: PipelineConfig, catalog: SpeciesCatalog, mask=None):
    """Model + feature rasters when ``paths.model`` is set, else species rasters."""
    model_path = config.path("model", required=False)
    try:
        if model_path is not None:
            model = sdm.load_model(model_path)
            if model.n_species != len(catalog):
                raise ConfigError(f"model predicts {model.n_species} species, catalog has {len(catalog)}")
            features, fgrid = sdm.load_feature_stacks(config.path("features"), config.grid)
            return sdm.ModelPredictor(model, config.grid, features, mask)
        rasters = config.path("species_rasters", required=False)
        if rasters is None:
            raise ConfigError("config needs paths.model (with paths.features) or paths.species_rasters")
        paths = sorted(rasters.glob("*.rast")) if rasters.is_dir() else [rasters]
        pred = sdm.load_raster_predictor(paths, catalog)
        if pred.grid != config.grid:
            raise ConfigError(f"species raster grid {pred.grid} differs from configured grid")
        return pred
    except ConfigError:
        raise
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load predictor: {exc}")


def load_thresholds(config: PipelineConfig, catalog: SpeciesCatalog):
    try:
        ts, _ = calibrate.read_thresholds(config.path("thresholds"), catalog)
    except ConfigError:
        raise
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load thresholds: {exc}")
    return ts


# -- tile tasks ----------------------------------------------------------------------

@dataclass
class MapContext:
    """Immutable inputs shared with every worker."""

    grid: GridSpec
    predictor: object
    thresholds: calibrate.ThresholdSet
    mask: TerrestrialMask | None = None
    definitions: list = field(default_factory=list)
    habitat_model: object = None
    top_k: int = habitat.DEFAULT_TOP_K
    hierarchy: dict | None = None


def _tile_probs(ctx: MapContext, tile: MetaTile) -> np.ndarray:
    return ctx.predictor.predict_cells(tile.flat_indices(ctx.grid))


def _land(ctx: MapContext, tile: MetaTile) -> np.ndarray:
    if ctx.mask is None:
        return np.ones(tile.height * tile.width, dtype=bool)
    return ctx.mask.bitmask[tile.window].ravel()


def species_tile(ctx: MapContext, tile: MetaTile) -> dict:
    probs = _tile_probs(ctx, tile)
    present = calibrate.presence_mask(probs, ctx.thresholds)
    values = np.where(present, probs, np.nan).astype("<f4")
    return {
        "values": values.T.reshape(-1, tile.height, tile.width),
        "count": present.sum(axis=0).astype(np.int64),
        "land_count": present[_land(ctx, tile)].sum(axis=0).astype(np.int64),
    }


def presence_count_tile(ctx: MapContext, tile: MetaTile) -> dict:
    present = calibrate.presence_mask(_tile_probs(ctx, tile), ctx.thresholds)
    return {"land_count": present[_land(ctx, tile)].sum(axis=0).astype(np.int64)}


def indicator_tile(ctx: MapContext, tile: MetaTile) -> dict:
    layers = indicators.compute_indicator_layers(_tile_probs(ctx, tile), ctx.definitions, ctx.thresholds)
    out = {}
    for d in ctx.definitions:
        bands = [layers[d.name][b] for b in indicators.band_names(d.kind)]
        dtype = "<i2" if d.kind == "MAX_STATUS" else "<f4"
        out[d.name] = np.stack(bands).astype(dtype).reshape(len(bands), tile.height, tile.width)
    return out


def habitat_tile(ctx: MapContext, tile: MetaTile) -> dict:
    l3 = habitat.classify_cells(_tile_probs(ctx, tile), ctx.thresholds, ctx.habitat_model, ctx.top_k)
    return {"L3": l3.astype("<i2").reshape(tile.height, tile.width)}


# -- products --------------------------------------------------------------------------

def _staging_dir(out_dir: Path, product: str) -> Path:
    return out_dir / ".staging" / product


def _assemble(writers: dict, tiles, staged, pick) -> None:
    try:
        for tile, path in zip(tiles, staged):
            with np.load(path) as z:
                rows, cols = tile.window
                for key, w in writers.items():
                    w.write_window(rows, cols, pick(z, key))
        for w in writers.values():
            w.commit()
    except BaseException:
        for w in writers.values():
            if getattr(w, "data", None) is not None:
                w.abort()
        raise


def _finish(out_dir: Path, product: str) -> None:
    shutil.rmtree(_staging_dir(out_dir, product), ignore_errors=True)
    try:
        (out_dir / ".staging").rmdir()
    except OSError:
        pass


def _safe_name(sid: str) -> str:
    return sid.replace(os.sep, "_").replace("/", "_")


def run_species_maps(ctx: MapContext, catalog: SpeciesCatalog, out_dir, workers=1,
                     tile_size_m=DEFAULT_TILE_SIZE) -> dict:
    """One f32 raster per species with at least one cell at or above threshold.

    Values below threshold are NaN (nodata). Writes ``species/manifest.json``.
    """
    out_dir = Path(out_dir)
    tiles = make_tiling(ctx.grid, tile_size_m)
    staged = schedule_tiles(tiles, workers, species_tile, ctx, _staging_dir(out_dir, "species"),
                            out_dir)
    counts = np.zeros(len(catalog), dtype=np.int64)
    land_counts = np.zeros(len(catalog), dtype=np.int64)
    for p in staged:
        with np.load(p) as z:
            counts += z["count"]
            land_counts += z["land_count"]
    produced = [s for s in range(len(catalog)) if counts[s] > 0]
    species_dir = out_dir / "species"
    if species_dir.exists():
        shutil.rmtree(species_dir)
    species_dir.mkdir(parents=True)
    writers = {s: RasterWriter(species_dir / f"{_safe_name(catalog.species_ids[s])}.rast", ctx.grid,
                               "f32", [catalog.species_ids[s]], float("nan")) for s in produced}
    _assemble(writers, tiles, staged, lambda z, s: z["values"][s])
    n_land = ctx.mask.n_land if ctx.mask is not None else ctx.grid.n_cells
    manifest = {
        "produced": [
            {"species_id": catalog.species_ids[s], "file": f"{_safe_name(catalog.species_ids[s])}.rast",
             "cell_count": int(counts[s]), "land_cell_count": int(land_counts[s]),
             "land_fraction": float(land_counts[s] / n_land)}
            for s in produced
        ],
        "suppressed": [catalog.species_ids[s] for s in range(len(catalog)) if counts[s] == 0],
        "n_terrestrial_cells": int(n_land),
    }
    with open(species_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    _finish(out_dir, "species")
    return manifest


def specialist_prepass(ctx: MapContext, workers=1, tile_size_m=DEFAULT_TILE_SIZE, out_dir=None,
                       tau=indicators.DEFAULT_SPECIALIST_TAU) -> np.ndarray:
    """Boolean specialist flag per species from thresholded land-cell occupancy."""
    out_dir = Path(out_dir)
    tiles = make_tiling(ctx.grid, tile_size_m)
    staged = schedule_tiles(tiles, workers, presence_count_tile, ctx,
                            _staging_dir(out_dir, "prepass"), out_dir)
    counts = np.zeros(ctx.predictor.n_species, dtype=np.int64)
    for p in staged:
        with np.load(p) as z:
            counts += z["land_count"]
    _finish(out_dir, "prepass")
    n_land = ctx.mask.n_land if ctx.mask is not None else ctx.grid.n_cells
    return indicators.specialist_mask(counts, n_land, tau)


def run_indicator_maps(ctx: MapContext, catalog: SpeciesCatalog, out_dir, workers=1,
                       tile_size_m=DEFAULT_TILE_SIZE, config=None,
                       specialist_tau=indicators.DEFAULT_SPECIALIST_TAU) -> list:
    """One raster per indicator under ``indicators/``; returns the definitions used."""
    out_dir = Path(out_dir)
    config = indicators.default_config() if config is None else config
    specialists = None
    if indicators.needs_specialists(config):
        specialists = specialist_prepass(ctx, workers, tile_size_m, out_dir, specialist_tau)
    try:
        defs = indicators.build_definitions(config, catalog, specialists)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid indicator configuration: {exc}")
    ctx = MapContext(ctx.grid, ctx.predictor, ctx.thresholds, ctx.mask, defs)
    tiles = make_tiling(ctx.grid, tile_size_m)
    staged = schedule_tiles(tiles, workers, indicator_tile, ctx,
                            _staging_dir(out_dir, "indicators"), out_dir)
    ind_dir = out_dir / "indicators"
    ind_dir.mkdir(parents=True, exist_ok=True)
    writers = {}
    for d in defs:
        if d.kind == "MAX_STATUS":
            writers[d.name] = RasterWriter(ind_dir / f"{d.name}.rast", ctx.grid, "i16",
                                           indicators.band_names(d.kind), indicators.STATUS_NODATA)
        else:
            writers[d.name] = RasterWriter(ind_dir / f"{d.name}.rast", ctx.grid, "f32",
                                           indicators.band_names(d.kind), None)
    _assemble(writers, tiles, staged, lambda z, name: z[name])
    summary = [{"name": d.name, "kind": d.kind, "file": f"{d.name}.rast",
                "species": [catalog.species_ids[s] for s in d.species]} for d in defs]
    with open(ind_dir / "indicators.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    _finish(out_dir, "indicators")
    return defs


def run_habitat_maps(ctx: MapContext, out_dir, workers=1, tile_size_m=DEFAULT_TILE_SIZE) -> dict:
    """i16 class-index rasters ``habitat/L3|L2|L1.rast`` plus ``habitat/classes.json``."""
    out_dir = Path(out_dir)
    tiles = make_tiling(ctx.grid, tile_size_m)
    staged = schedule_tiles(tiles, workers, habitat_tile, ctx, _staging_dir(out_dir, "habitat"),
                            out_dir)
    tables, to_l2, to_l1 = habitat.level_tables(ctx.habitat_model.classes, ctx.hierarchy)
    hab_dir = out_dir / "habitat"
    hab_dir.mkdir(parents=True, exist_ok=True)
    writers = {lv: RasterWriter(hab_dir / f"{lv}.rast", ctx.grid, "i16", [lv], -1)
               for lv in ("L3", "L2", "L1")}
    maps = {"L3": lambda a: a, "L2": lambda a: to_l2[a], "L1": lambda a: to_l1[a]}
    _assemble(writers, tiles, staged, lambda z, lv: maps[lv](z["L3"]).astype("<i2"))
    with open(hab_dir / "classes.json", "w", encoding="utf-8") as fh:
        json.dump(tables, fh, indent=2)
    _finish(out_dir, "habitat")
    return tables
