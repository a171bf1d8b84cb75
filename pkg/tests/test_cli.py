import json

import pytest

from biomap import cli, pipeline
from biomap.raster import raster_read


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    assert cli.main(["synth", "--out", str(root), "--size", "40", "--seed", "1"]) == 0
    cfg = json.loads((root / "config.json").read_text())
    cfg.update(block_size_m=1000, tile_size_m=2500, train={**cfg["train"], "epochs": 5})
    (root / "config.json").write_text(json.dumps(cfg))
    return root


def run(demo, *args):
    return cli.main([args[0], "--config", str(demo / "config.json"), *args[1:]])


def test_full_command_chain(demo, monkeypatch, capsys):
    monkeypatch.delenv(pipeline.WORKERS_ENV, raising=False)
    for cmd in ("ingest", "train", "calibrate", "map-species", "map-indicators", "map-habitats",
                "evaluate"):
        assert run(demo, cmd) == 0, cmd
    out = demo / "out"
    report = json.loads((out / "ingest_report.json").read_text())
    assert all(report["cells_per_fold"][f] > 0 for f in ("train", "val", "test"))
    assert raster_read(out / "split.rast").dtype == "u8"
    assert (out / "model.atlsdm").read_bytes()[:7] == b"ATLSDM1"
    assert (out / "thresholds.csv").read_text().startswith("# ")
    assert (out / "species" / "manifest.json").exists()
    assert len(list((out / "indicators").glob("*.rast"))) >= 7
    assert {p.name for p in (out / "habitat").glob("*.rast")} == {"L1.rast", "L2.rast", "L3.rast"}
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["habitat_accuracy"]) == {"Level 1", "Level 2", "Level 3"}
    assert '"AUC"' in capsys.readouterr().out


def test_out_override_and_worker_flag(demo, tmp_path, monkeypatch):
    monkeypatch.delenv(pipeline.WORKERS_ENV, raising=False)
    assert run(demo, "ingest", "--out", str(tmp_path), "--workers", "2", "--seed", "4") == 0
    assert (tmp_path / "occupancy.csv").exists()


def test_missing_config_is_validation_error(tmp_path):
    assert cli.main(["ingest", "--config", str(tmp_path / "nope.json")]) == 1


def test_missing_inputs_is_validation_error(demo, tmp_path):
    cfg = json.loads((demo / "config.json").read_text())
    cfg["paths"]["catalog"] = str(tmp_path / "absent.csv")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert cli.main(["ingest", "--config", str(tmp_path / "c.json")]) == 1
    cfg["paths"]["catalog"] = str(demo / "catalog.csv")
    cfg["out_dir"] = str(tmp_path / "fresh")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    # train before ingest: no occupancy in the output directory
    assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == 1


def test_bad_worker_env_is_validation_error(demo, monkeypatch):
    monkeypatch.setenv(pipeline.WORKERS_ENV, "-3")
    assert run(demo, "ingest") == 1


def test_tile_failure_exit_code(demo, monkeypatch, tmp_path):
    monkeypatch.delenv(pipeline.WORKERS_ENV, raising=False)
    assert run(demo, "ingest") == 0 and run(demo, "train") == 0 and run(demo, "calibrate") == 0

    def boom(ctx, tile):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pipeline, "species_tile", boom)
    cfg = json.loads((demo / "config.json").read_text())
    cfg["paths"].update(model=str(demo / "out" / "model.atlsdm"),
                        thresholds=str(demo / "out" / "thresholds.csv"))
    cfg["out_dir"] = str(tmp_path / "failing")
    (demo / "failing.json").write_text(json.dumps(cfg))
    assert cli.main(["map-species", "--config", str(demo / "failing.json")]) == 2
    assert any((tmp_path / "failing" / "quarantine").iterdir())
    assert not (tmp_path / "failing" / "species").exists()


def test_map_products_identical_across_workers(demo, tmp_path, monkeypatch):
    monkeypatch.delenv(pipeline.WORKERS_ENV, raising=False)
    assert run(demo, "ingest") == 0 and run(demo, "train") == 0 and run(demo, "calibrate") == 0
    cfg = json.loads((demo / "config.json").read_text())
    cfg["paths"].update(model=str(demo / "out" / "model.atlsdm"),
                        thresholds=str(demo / "out" / "thresholds.csv"))
    trees = []
    for workers in ("1", "3"):
        cfg["out_dir"] = str(tmp_path / workers)
        (demo / "workers.json").write_text(json.dumps(cfg))
        monkeypatch.setenv(pipeline.WORKERS_ENV, workers)
        for cmd in ("map-species", "map-indicators", "map-habitats"):
            assert cli.main([cmd, "--config", str(demo / "workers.json")]) == 0
        root = tmp_path / workers
        trees.append({p.relative_to(root): p.read_bytes() for p in root.rglob("*") if p.is_file()})
    assert trees[0] and trees[0] == trees[1]
