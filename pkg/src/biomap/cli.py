"""Command-line entry point.

    biomap <command> --config CONFIG [--workers N] [--seed N] [--out DIR]

Commands: ingest, train, calibrate, map-species, map-indicators,
map-habitats, evaluate (plus ``synth`` to generate a demo world).
Exit status: 0 success, 1 validation error, 2 runtime failure.
"""

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from biomap import calibrate, evalsuite, habitat, indicators, occurrence, pipeline, sdm
from biomap.geogrid import cell_center
from biomap.pipeline import ConfigError, PipelineConfig, TileFailure
from biomap.raster import RasterFile, raster_read, raster_write

log = logging.getLogger("biomap")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


@contextlib.contextmanager
def _validating(what):
    try:
        yield
    except ConfigError:
        raise
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}")


def _input(cfg: PipelineConfig, key: str, default_name: str) -> Path:
    """Configured path, else the file an earlier command left in the output dir."""
    p = cfg.path(key, required=False)
    if p is None:
        p = cfg.out_dir / default_name
    if not Path(p).exists():
        raise ConfigError(f"input for {key} not found: {p}")
    return Path(p)


def _load_occupancy(cfg, catalog):
    with _validating("occupancy"):
        occ = occurrence.read_occupancy_csv(_input(cfg, "occupancy", "occupancy.csv"), cfg.grid, catalog)
        split = raster_read(_input(cfg, "split", "split.rast"))
        if split.grid != cfg.grid:
            raise ConfigError("split raster grid differs from configured grid")
    return occ, split.data[0].ravel()


def _model_predictor(cfg, catalog, mask):
    if cfg.path("model", required=False) is None:
        cfg.paths["model"] = str(_input(cfg, "model", "model.atlsdm"))
    return pipeline.load_predictor(cfg, catalog, mask)


def _fold_cells(occ, folds, fold):
    code = occurrence.FOLDS.index(fold)
    return occ.cells[folds[occ.cells] == code]


def cmd_ingest(cfg: PipelineConfig, args) -> int:
    catalog = pipeline.load_catalog(cfg)
    mask = pipeline.load_mask(cfg)
    with _validating("occurrences"):
        records = occurrence.read_occurrences_csv(cfg.path("occurrences"))
        split = occurrence.split_spatial_blocks(cfg.grid, cfg.block_size_m, cfg.fractions, cfg.seed)
    occ = occurrence.aggregate_to_grid(records, cfg.grid, catalog, mask)
    kept = occurrence.target_group_filter(occ)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    occurrence.write_occupancy_csv(cfg.out_dir / "occupancy.csv", kept, catalog)
    raster_write(cfg.out_dir / "split.rast", RasterFile(cfg.grid, "u8", split.folds, ["fold"], 255))
    rep = occ.report
    report = {
        "records": rep.n_records, "out_of_extent": rep.out_of_extent, "relocated": rep.relocated,
        "unknown_species": rep.unknown_species, "cells_with_records": int(len(kept.cells)),
        "cells_per_fold": {f: int(np.sum(split.folds.ravel()[kept.cells] == i))
                           for i, f in enumerate(occurrence.FOLDS)},
    }
    (cfg.out_dir / "ingest_report.json").write_text(json.dumps(report, indent=2))
    log.info("ingested %d records into %d cells", rep.n_records, len(kept.cells))
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    catalog = pipeline.load_catalog(cfg)
    mask = pipeline.load_mask(cfg)
    occ, folds = _load_occupancy(cfg, catalog)
    with _validating("features"):
        features, _ = sdm.load_feature_stacks(cfg.path("features"), cfg.grid)
        shapes = {m: tuple(s) for m, s in cfg.train.get("shapes", {}).items()} or \
            {m: (features[m].shape[1],) for m in sdm.MODALITIES}
        opts = {k: v for k, v in cfg.train.items() if k != "shapes"}
        tc = sdm.TrainConfig(seed=cfg.seed, **opts)
    cells = _fold_cells(occ, folds, "train")
    if cells.size == 0:
        raise ConfigError("no training cells with records in the train fold")
    src = mask.relocation_table()[cells] if mask is not None else cells
    model = sdm.fit({m: features[m][src] for m in sdm.MODALITIES}, occ.label_matrix(cells), tc, shapes)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    sdm.save_model(cfg.out_dir / "model.atlsdm", model, catalog.species_ids)
    log.info("trained on %d cells; loss %.4f -> %.4f", cells.size, model.history[0], model.history[-1])
    return EXIT_OK


def cmd_calibrate(cfg: PipelineConfig, args) -> int:
    catalog = pipeline.load_catalog(cfg)
    mask = pipeline.load_mask(cfg)
    occ, folds = _load_occupancy(cfg, catalog)
    predictor = _model_predictor(cfg, catalog, mask)
    cells = _fold_cells(occ, folds, "val")
    if cells.size == 0:
        raise ConfigError("no validation cells with records")
    probs, truth = predictor.predict_cells(cells), occ.label_matrix(cells)
    with _validating("calibration"):
        if cfg.threshold_mode == "conformal":
            ts = calibrate.fit_conformal_thresholds(probs, truth, cfg.alpha)
        else:
            ts = calibrate.fit_fscore_threshold(probs, truth)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    calibrate.write_thresholds(cfg.out_dir / "thresholds.csv", ts, catalog.species_ids)
    return EXIT_OK


def _map_context(cfg, catalog):
    mask = pipeline.load_mask(cfg)
    predictor = (_model_predictor(cfg, catalog, mask)
                 if cfg.path("species_rasters", required=False) is None
                 else pipeline.load_predictor(cfg, catalog, mask))
    if cfg.path("thresholds", required=False) is None:
        cfg.paths["thresholds"] = str(_input(cfg, "thresholds", "thresholds.csv"))
    ts = pipeline.load_thresholds(cfg, catalog)
    return pipeline.MapContext(cfg.grid, predictor, ts, mask)


def cmd_map_species(cfg: PipelineConfig, args) -> int:
    catalog = pipeline.load_catalog(cfg)
    ctx = _map_context(cfg, catalog)
    manifest = pipeline.run_species_maps(ctx, catalog, cfg.out_dir, cfg.workers, cfg.tile_size_m)
    log.info("%d species maps, %d suppressed", len(manifest["produced"]), len(manifest["suppressed"]))
    return EXIT_OK


def cmd_map_indicators(cfg: PipelineConfig, args) -> int:
    catalog = pipeline.load_catalog(cfg)
    ctx = _map_context(cfg, catalog)
    ind_path = cfg.path("indicators", required=False)
    with _validating("indicator configuration"):
        ind_cfg = indicators.load_indicator_config(ind_path) if ind_path else None
        # resolve everything except the specialist set up front
        indicators.build_definitions(ind_cfg or indicators.default_config(), catalog,
                                     specialists=np.zeros(len(catalog), bool))
    pipeline.run_indicator_maps(ctx, catalog, cfg.out_dir, cfg.workers, cfg.tile_size_m, ind_cfg,
                                cfg.specialist_tau)
    return EXIT_OK


def _habitat_model(cfg, catalog):
    with _validating("habitat plots"):
        plots = habitat.read_labeled_plots(cfg.path("habitat_plots"), catalog)
        model = habitat.train_standin(plots, len(catalog))
        h = cfg.path("hierarchy", required=False)
        hierarchy = habitat.load_hierarchy(h) if h else None
    return model, hierarchy


def cmd_map_habitats(cfg: PipelineConfig, args) -> int:
    catalog = pipeline.load_catalog(cfg)
    ctx = _map_context(cfg, catalog)
    ctx.habitat_model, ctx.hierarchy = _habitat_model(cfg, catalog)
    ctx.top_k = cfg.top_k
    pipeline.run_habitat_maps(ctx, cfg.out_dir, cfg.workers, cfg.tile_size_m)
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    catalog = pipeline.load_catalog(cfg)
    ctx = _map_context(cfg, catalog)
    eval_path = cfg.path("eval_plots", required=False)
    with _validating("evaluation plots"):
        if eval_path is not None:
            rows = evalsuite.read_eval_plots_csv(eval_path, cfg.grid, catalog)
        else:
            occ, folds = _load_occupancy(cfg, catalog)
            rows = [(f"cell{c}", cfg.grid.cell_at(c), occ.vector(c))
                    for c in _fold_cells(occ, folds, "test")]
    if not rows:
        raise ConfigError("no evaluation plots")
    flat = np.array([cfg.grid.flat_index(c) for _, c, _ in rows])
    probs = ctx.predictor.predict_cells(flat)
    plots = [evalsuite.EvalPlot(pid, c, probs[i], t) for i, (pid, c, t) in enumerate(rows)]
    report = evalsuite.evaluate_sdm(plots, ctx.thresholds)
    hab_path = cfg.path("habitat_eval", required=False)
    if hab_path is not None:
        model, _ = _habitat_model(cfg, catalog)
        with _validating("habitat evaluation plots"):
            hab_rows = _read_habitat_eval(hab_path, cfg.grid)
        cells = np.array([cfg.grid.flat_index(c) for c, _ in hab_rows])
        idx = habitat.classify_cells(ctx.predictor.predict_cells(cells), ctx.thresholds, model,
                                     cfg.top_k)
        report.habitat_accuracy = evalsuite.habitat_report([model.classes[i] for i in idx],
                                                           [code for _, code in hab_rows])
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    evalsuite.write_report(cfg.out_dir / "metrics.json", report)
    print(json.dumps(report.to_json(), indent=2))
    return EXIT_OK


def _read_habitat_eval(path, grid):
    """``plot_id,easting,northing,eunis_level3`` rows inside the grid."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cell = grid.locate(float(row["easting"]), float(row["northing"]))
            if cell is not None:
                out.append((cell, row["eunis_level3"].strip()))
    return out


def cmd_synth(args) -> int:
    """Write a generated demo world plus a ready-to-run config into ``--out``."""
    from biomap import synthetic

    out = Path(args.out or "demo")
    out.mkdir(parents=True, exist_ok=True)
    world = synthetic.make_world(size=args.size, seed=args.seed or 0)
    grid = world.grid
    world.catalog.to_csv(out / "catalog.csv")
    occurrence.write_occurrences_csv(out / "occurrences.csv",
                                     synthetic.sample_records(world, seed=(args.seed or 0) + 1))
    raster_write(out / "mask.rast", RasterFile(grid, "u8", world.mask.bitmask.astype(np.uint8),
                                               ["land"], None))
    for m in sdm.MODALITIES:
        data = world.features[m].T.reshape(-1, grid.height, grid.width)
        raster_write(out / f"{m}.rast", RasterFile(grid, "f32", data,
                                                   [f"{m}_{i}" for i in range(data.shape[0])]))
    rng = np.random.default_rng(args.seed or 0)
    land = np.flatnonzero(world.mask.bitmask.ravel())
    train_cells = rng.choice(land, size=min(2000, land.size // 2), replace=False)
    habitat.write_labeled_plots(out / "habitat_plots.csv", synthetic.habitat_plots(world, train_cells),
                                world.catalog)
    rest = np.setdiff1d(land, train_cells)
    eval_cells = rng.choice(rest, size=min(500, rest.size), replace=False)
    with open(out / "habitat_eval.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["plot_id", "easting", "northing", "eunis_level3"])
        for i, c in enumerate(np.sort(eval_cells)):
            x, y = cell_center(grid, grid.cell_at(c))
            w.writerow([f"h{i:05d}", repr(float(x)), repr(float(y)), world.habitat[c]])
    config = {
        "grid": grid.to_dict(),
        "out_dir": "out",
        "tile_size_m": 25000,
        "seed": args.seed or 0,
        "fractions": [0.6, 0.2, 0.2],
        "threshold_mode": "conformal",
        "alpha": 0.1,
        "paths": {
            "catalog": "catalog.csv", "occurrences": "occurrences.csv", "mask": "mask.rast",
            "features": {m: f"{m}.rast" for m in sdm.MODALITIES},
            "habitat_plots": "habitat_plots.csv", "habitat_eval": "habitat_eval.csv",
        },
        "train": {"shapes": {m: list(s) for m, s in world.shapes.items()}},
    }
    (out / "config.json").write_text(json.dumps(config, indent=2))
    print(f"demo world written to {out}; try: biomap ingest --config {out / 'config.json'}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "map-species": cmd_map_species,
    "map-indicators": cmd_map_indicators,
    "map-habitats": cmd_map_habitats,
    "evaluate": cmd_evaluate,
}


HELP = {
    "ingest": "aggregate occurrences to cell occupancy and split into folds",
    "train": "fit the multi-modal SDM on the training fold",
    "calibrate": "fit presence thresholds on the validation fold",
    "map-species": "write per-species probability rasters",
    "map-indicators": "write biodiversity indicator rasters",
    "map-habitats": "write level 1-3 habitat rasters",
    "evaluate": "score predictions on held-out plots",
    "synth": "generate a synthetic demo world and config",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biomap", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["synth"]:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=name != "synth", help="pipeline config JSON")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (${pipeline.WORKERS_ENV} wins)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        if name == "synth":
            p.add_argument("--size", type=int, default=200, help="grid side in cells")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = PipelineConfig.load(args.config)
        if args.out:
            cfg.out_dir = Path(args.out)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.workers = pipeline.resolve_workers(args.workers, cfg.workers)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except TileFailure as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception:
        log.exception("runtime failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
