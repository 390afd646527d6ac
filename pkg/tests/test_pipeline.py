"""End-to-end run mechanics: config validation, staging, resume, exports."""

import json
import zipfile
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

import satdetect.pipeline as P
from satdetect.geo import ValidationError
from satdetect.models import ClassifierModel, build_classifier_network, save_classifier
from satdetect.pipeline import (
    EvalConfig,
    PipelineConfig,
    PipelineError,
    build_inputs,
    load_tiles_dir,
    run_pipeline,
)


@pytest.fixture(scope="module")
def classifier_path(tmp_path_factory):
    """An untrained classifier checkpoint; runs only need the mechanics."""
    net = build_classifier_network(seed=3)
    path = tmp_path_factory.mktemp("ckpt") / "classifier.ckpt"
    save_classifier(ClassifierModel(network=net, threshold=0.5), path)
    return str(path)


def small_config(classifier_path, out, n_scenes=2, **overrides):
    items = [
        {
            "width": 256,
            "height": 256,
            "style": "A",
            "building_density": 60,
            "rng_seed": 40 + i,
        }
        for i in range(n_scenes)
    ]
    cfg = {
        "scenes": {"kind": "specs", "items": items},
        "output_dir": str(out),
        "classifier": classifier_path,
        "tau": 0.4,
    }
    cfg.update(overrides)
    return PipelineConfig.from_dict(cfg)


# -- config -------------------------------------------------------------------


def test_config_round_trips_through_dict(classifier_path, tmp_path):
    cfg = small_config(
        classifier_path,
        tmp_path,
        eval={"policy": "raw_uniform", "n": 100, "seed": 9, "negative_skew": 0.8},
        workers=2,
    )
    again = PipelineConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_config_rejects_unknown_keys(classifier_path, tmp_path):
    base = small_config(classifier_path, tmp_path).to_dict()
    for poison in [
        {"speed": "fast"},
        {"proposal": {"mag_threshold": 0.5, "blur": 2}},
        {"eval": {"policy": "raw_uniform", "bootstrap": True}},
        {"scenes": {"kind": "benchmark", "count": 3}},
        {"scenes": {"kind": "specs", "items": [{"width": 256, "height": 256, "color": 1}]}},
    ]:
        bad = dict(base)
        bad.update(poison)
        with pytest.raises(ValidationError, match="unknown"):
            PipelineConfig.from_dict(bad)


def test_config_rejects_bad_values(classifier_path, tmp_path):
    base = small_config(classifier_path, tmp_path).to_dict()
    for poison, msg in [
        ({"scenes": {"kind": "orbit"}}, "scenes.kind"),
        ({"workers": 0}, "workers"),
        ({"iou": 0.0}, "iou"),
        ({"tau": 1.5}, "tau"),
        ({"cell_size": 0.0}, "cell_size"),
    ]:
        bad = dict(base)
        bad.update(poison)
        with pytest.raises(ValidationError, match=msg):
            PipelineConfig.from_dict(bad)


# -- inputs -------------------------------------------------------------------


def test_generated_scenes_line_up_west_to_east(classifier_path, tmp_path):
    cfg = small_config(classifier_path, tmp_path, n_scenes=3)
    tiles, truth = build_inputs(cfg)
    assert [t.id for t in tiles] == ["scene_0000", "scene_0001", "scene_0002"]
    lons = [t.transform.origin_lon for t in tiles]
    assert lons == sorted(lons) and len(set(lons)) == 3
    assert set(truth) == {t.id for t in tiles}


def test_tiles_dir_reads_pngs_and_sidecars(tmp_path):
    d = tmp_path / "tiles"
    d.mkdir()
    px = (np.linspace(0, 1, 32 * 64).reshape(32, 64) * 255).astype(np.uint8)
    Image.fromarray(px, mode="L").save(d / "b_tile.png")
    Image.fromarray(np.zeros((64, 64), dtype=np.uint8), mode="L").save(d / "a_tile.png")
    (d / "a_tile.json").write_text(
        json.dumps(
            {
                "transform": {
                    "origin_lon": 10.0,
                    "origin_lat": 5.0,
                    "deg_per_pixel_x": 1e-4,
                    "deg_per_pixel_y": -1e-4,
                },
                "meta": {"country": "B"},
            }
        )
    )
    tiles = load_tiles_dir(d)
    assert [t.id for t in tiles] == ["a_tile", "b_tile"]
    assert tiles[0].transform.origin_lon == 10.0
    assert tiles[0].meta == {"country": "B"}
    assert tiles[1].pixels.shape == (32, 64)
    assert tiles[1].pixels.max() <= 1.0


def test_missing_tiles_dir_rejected(tmp_path):
    with pytest.raises(ValidationError, match="does not exist"):
        load_tiles_dir(tmp_path / "nope")


# -- runs ---------------------------------------------------------------------

ARTIFACTS = ("report.json", "detections.geojson", "detections.kmz", "density.png", "density.kmz")


def test_run_writes_every_artifact(classifier_path, tmp_path):
    out = tmp_path / "run"
    report = run_pipeline(small_config(classifier_path, out))
    for name in ARTIFACTS:
        assert (out / name).exists(), name
    assert report["tiles"] == {"total": 2, "processed": 2, "skipped_cloud": 0}
    assert report["candidates"] >= report["scored"] >= report["masks_kept"]
    assert report["detections"] == report["masks_kept"]
    assert 0.0 < report["reduction_fraction"] <= 1.0
    assert len(report["per_tile"]) == 2
    on_disk = json.loads((out / "report.json").read_text())
    assert on_disk == report
    with zipfile.ZipFile(out / "density.kmz") as z:
        assert z.namelist()[0] == "doc.kml"
        assert "files/density.png" in z.namelist()


def test_empty_input_yields_empty_report(classifier_path, tmp_path):
    out = tmp_path / "empty"
    cfg = PipelineConfig.from_dict(
        {
            "scenes": {"kind": "specs", "items": []},
            "output_dir": str(out),
            "classifier": classifier_path,
        }
    )
    report = run_pipeline(cfg)
    assert report["tiles"]["total"] == 0
    assert report["detections"] == 0
    assert (out / "report.json").exists()
    assert (out / "detections.geojson").exists()
    assert not (out / "density.png").exists()


def test_white_tile_is_skipped_as_cloud(classifier_path, tmp_path):
    d = tmp_path / "tiles"
    d.mkdir()
    Image.fromarray(np.full((256, 256), 250, dtype=np.uint8), mode="L").save(
        d / "white.png"
    )
    cfg = PipelineConfig.from_dict(
        {
            "scenes": {"kind": "tiles", "dir": str(d)},
            "output_dir": str(tmp_path / "out"),
            "classifier": classifier_path,
        }
    )
    report = run_pipeline(cfg)
    assert report["tiles"]["skipped_cloud"] == 1
    assert report["candidates"] == 0


def test_run_without_classifier_fails(tmp_path):
    cfg = PipelineConfig.from_dict(
        {
            "scenes": {"kind": "specs", "items": [{"width": 256, "height": 256}]},
            "output_dir": str(tmp_path),
        }
    )
    with pytest.raises(PipelineError, match="classifier"):
        run_pipeline(cfg)


def test_eval_on_tile_dir_fails(classifier_path, tmp_path):
    d = tmp_path / "tiles"
    d.mkdir()
    Image.fromarray(np.zeros((256, 256), dtype=np.uint8), mode="L").save(d / "t.png")
    cfg = PipelineConfig.from_dict(
        {
            "scenes": {"kind": "tiles", "dir": str(d)},
            "output_dir": str(tmp_path / "out"),
            "classifier": classifier_path,
            "eval": {"policy": "raw_uniform", "n": 100},
        }
    )
    with pytest.raises(PipelineError, match="generated scenes"):
        run_pipeline(cfg)


def test_eval_adds_metrics_and_curve(classifier_path, tmp_path):
    out = tmp_path / "run"
    cfg = small_config(
        classifier_path,
        out,
        eval={"policy": "raw_uniform", "n": 200, "seed": 9, "negative_skew": 0.8},
    )
    report = run_pipeline(cfg)
    assert "eval" in report
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics == report["eval"]
    lines = (out / "pr.csv").read_text().splitlines()
    assert lines[0] == "threshold,precision,recall"
    assert len(lines) > 1


def test_stage_failure_names_stage_and_tile(classifier_path, tmp_path, monkeypatch):
    import satdetect.pipeline as pl

    def boom(tile, opts):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pl, "propose_masks", boom)
    cfg = small_config(classifier_path, tmp_path / "out", n_scenes=1)
    with pytest.raises(PipelineError, match="propose.*scene_0000"):
        run_pipeline(cfg)


def _compare_outputs(a: Path, b: Path):
    for name in ARTIFACTS[1:]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ra = json.loads((a / "report.json").read_text())
    rb = json.loads((b / "report.json").read_text())
    for r in (ra, rb):
        r["config"].pop("output_dir")
        r["config"].pop("workers")
    assert ra == rb


def test_interrupted_run_resumes_to_identical_outputs(
    classifier_path, tmp_path, monkeypatch
):
    full = tmp_path / "full"
    run_pipeline(small_config(classifier_path, full, n_scenes=3))

    resumed = tmp_path / "resumed"
    real = P.process_tile

    def flaky(tile, opts):
        if tile.id == "scene_0001":
            raise PipelineError(f"stage classify failed on tile {tile.id}: killed")
        return real(tile, opts)

    monkeypatch.setattr(P, "process_tile", flaky)
    with pytest.raises(PipelineError, match="scene_0001"):
        run_pipeline(small_config(classifier_path, resumed, n_scenes=3))
    assert (resumed / "manifest.log").exists()
    assert not (resumed / "report.json").exists()

    monkeypatch.setattr(P, "process_tile", real)
    run_pipeline(small_config(classifier_path, resumed, n_scenes=3))
    _compare_outputs(full, resumed)


def test_rerun_into_same_dir_is_stable(classifier_path, tmp_path):
    out = tmp_path / "run"
    cfg = small_config(classifier_path, out)
    run_pipeline(cfg)
    before = {name: (out / name).read_bytes() for name in ARTIFACTS}
    report = run_pipeline(cfg)
    after = {name: (out / name).read_bytes() for name in ARTIFACTS}
    assert before == after
    assert report["tiles"]["processed"] == 2


def test_worker_pool_matches_serial(classifier_path, tmp_path):
    serial = tmp_path / "serial"
    run_pipeline(small_config(classifier_path, serial, n_scenes=3))
    pooled = tmp_path / "pooled"
    run_pipeline(small_config(classifier_path, pooled, n_scenes=3, workers=2))
    _compare_outputs(serial, pooled)


def test_env_var_overrides_output_dir(classifier_path, tmp_path, monkeypatch):
    override = tmp_path / "elsewhere"
    monkeypatch.setenv(P.OUTPUT_DIR_ENV, str(override))
    run_pipeline(small_config(classifier_path, tmp_path / "ignored", n_scenes=1))
    assert (override / "report.json").exists()
    assert not (tmp_path / "ignored").exists()
