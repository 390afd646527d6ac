"""End-to-end orchestration: config, staged tile runs, artifact export.

A run walks every input tile through cloud filtering, optional
denoising, candidate proposal, window classification, and overlap
suppression, then aggregates the surviving detections into a density
grid and writes the export set (report, GeoJSON, KMZ, heatmap). Each
finished tile is committed to an append-only manifest, so an
interrupted run picks up where it stopped and converges on byte
identical outputs.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dedup import ScoredMask, center_score_of, dedup_masks
from .geo import RasterTile, ValidationError
from .geoexport import (
    Detection,
    aggregate_density,
    package_kmz,
    write_geojson,
    write_grid_kml,
    write_kml,
    write_png_heatmap,
)
from .labelstore import JsonLog
from .proposal import ProposalParams, propose_masks
from .scene import PATCH_SIZE, CloudSpec, NoiseSpec, SceneSpec, generate_scene, style

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "SATDETECT_OUTPUT_DIR"

SCENE_KINDS = ("benchmark", "specs", "tiles")


class PipelineError(RuntimeError):
    """A run aborted; the message names the failing stage and tile."""


def _reject_unknown(d: dict, allowed, ctx: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ValidationError(f"unknown {ctx} key(s): {', '.join(unknown)}")


@dataclass(frozen=True)
class EvalConfig:
    policy: str = "proposal_conditioned"
    n: int = 2000
    seed: int = 0
    negative_skew: float = 0.93

    @classmethod
    def from_dict(cls, d: dict) -> EvalConfig:
        _reject_unknown(d, ("policy", "n", "seed", "negative_skew"), "eval")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "n": self.n,
            "seed": self.seed,
            "negative_skew": self.negative_skew,
        }


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run needs; validated up front, unknown keys rejected."""

    scenes: dict
    output_dir: str
    classifier: str | None = None
    denoiser: str | None = None
    proposal: ProposalParams = field(default_factory=ProposalParams)
    tau: float | None = None  # None: use the checkpoint's stored threshold
    iou: float = 0.3
    filter_threshold: float = 0.2
    pixel_threshold: float = 0.5
    eval: EvalConfig | None = None
    workers: int = 1
    cell_size: float = 0.02  # density grid, degrees

    def __post_init__(self) -> None:
        problems = []
        kind = self.scenes.get("kind")
        if kind not in SCENE_KINDS:
            problems.append(f"scenes.kind must be one of {SCENE_KINDS}, got {kind!r}")
        if not self.output_dir:
            problems.append("output_dir is required")
        if self.tau is not None and not 0.0 <= self.tau <= 1.0:
            problems.append(f"tau {self.tau} outside [0, 1]")
        if not 0.0 < self.iou <= 1.0:
            problems.append(f"iou {self.iou} outside (0, 1]")
        if not 0.0 <= self.filter_threshold <= 1.0:
            problems.append(f"filter_threshold {self.filter_threshold} outside [0, 1]")
        if self.workers < 1:
            problems.append(f"workers must be >= 1, got {self.workers}")
        if self.cell_size <= 0:
            problems.append(f"cell_size must be > 0, got {self.cell_size}")
        if problems:
            raise ValidationError("invalid config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        _reject_unknown(
            d,
            (
                "scenes",
                "output_dir",
                "classifier",
                "denoiser",
                "proposal",
                "tau",
                "iou",
                "filter_threshold",
                "pixel_threshold",
                "eval",
                "workers",
                "cell_size",
            ),
            "config",
        )
        d = dict(d)
        scenes = d.get("scenes")
        if not isinstance(scenes, dict):
            raise ValidationError("config needs a scenes table")
        _validate_scenes(scenes)
        if "proposal" in d:
            _reject_unknown(
                d["proposal"],
                ("mag_threshold", "min_length", "min_support", "orientation_tolerance"),
                "proposal",
            )
            d["proposal"] = ProposalParams(**d["proposal"])
        if d.get("eval") is not None:
            d["eval"] = EvalConfig.from_dict(d["eval"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "scenes": self.scenes,
            "output_dir": self.output_dir,
            "classifier": self.classifier,
            "denoiser": self.denoiser,
            "proposal": {
                "mag_threshold": self.proposal.mag_threshold,
                "min_length": self.proposal.min_length,
                "min_support": self.proposal.min_support,
                "orientation_tolerance": self.proposal.orientation_tolerance,
            },
            "tau": self.tau,
            "iou": self.iou,
            "filter_threshold": self.filter_threshold,
            "pixel_threshold": self.pixel_threshold,
            "eval": None if self.eval is None else self.eval.to_dict(),
            "workers": self.workers,
            "cell_size": self.cell_size,
        }


_SPEC_ITEM_KEYS = (
    "width",
    "height",
    "style",
    "building_density",
    "rng_seed",
    "noise",
    "cloud",
)


def _validate_scenes(scenes: dict) -> None:
    kind = scenes.get("kind")
    if kind == "benchmark":
        _reject_unknown(scenes, ("kind", "n", "seed"), "scenes")
    elif kind == "specs":
        _reject_unknown(scenes, ("kind", "items"), "scenes")
        for i, item in enumerate(scenes.get("items", ())):
            _reject_unknown(item, _SPEC_ITEM_KEYS, f"scenes.items[{i}]")
    elif kind == "tiles":
        _reject_unknown(scenes, ("kind", "dir"), "scenes")
        if not scenes.get("dir"):
            raise ValidationError("scenes.kind=tiles needs a dir")
    # unknown kinds are caught by PipelineConfig.__post_init__


def _spec_from_item(item: dict) -> SceneSpec:
    noise = item.get("noise")
    cloud = item.get("cloud")
    return SceneSpec(
        width=int(item["width"]),
        height=int(item["height"]),
        country_style=style(item.get("style", "A")),
        building_density=float(item.get("building_density", 5.0)),
        noise=None if noise is None else NoiseSpec(**noise),
        cloud=None if cloud is None else CloudSpec(**cloud),
        rng_seed=int(item.get("rng_seed", 0)),
    )


def load_tiles_dir(path: str | Path) -> list[RasterTile]:
    """Read every PNG in a directory as a tile, sorted by filename.

    A `<name>.json` sidecar next to `<name>.png` supplies the geo
    transform; tiles without one sit at the default origin.
    """
    from PIL import Image

    from .geo import GeoTransform

    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"tile directory {root} does not exist")
    tiles = []
    for png in sorted(root.glob("*.png")):
        pixels = np.asarray(Image.open(png).convert("L"), dtype=np.float64) / 255.0
        sidecar = png.with_suffix(".json")
        kwargs = {}
        if sidecar.exists():
            side = json.loads(sidecar.read_text())
            if "transform" in side:
                kwargs["transform"] = GeoTransform.from_dict(side["transform"])
            kwargs["meta"] = side.get("meta", {})
        tiles.append(RasterTile(id=png.stem, pixels=pixels, **kwargs))
    return tiles


def build_inputs(cfg: PipelineConfig):
    """Materialize input tiles; returns (tiles, truth_by_id or None).

    Generated scenes are laid out west to east, one tile width apart,
    so their detections land in distinct density cells. Truth is None
    for ingested tile directories, which have no ground truth.
    """
    scenes = cfg.scenes
    if scenes["kind"] == "tiles":
        return load_tiles_dir(scenes["dir"]), None
    if scenes["kind"] == "benchmark":
        from .benchmark import benchmark_specs

        specs = benchmark_specs(
            n=int(scenes.get("n", 50)), seed=int(scenes.get("seed", 2400))
        )
    else:
        specs = [_spec_from_item(item) for item in scenes.get("items", ())]
    tiles = []
    truth_by_id = {}
    lon = 0.0
    for i, spec in enumerate(specs):
        tile, truth = generate_scene(spec, tile_id=f"scene_{i:04d}", origin=(lon, 0.0))
        lon += spec.width * 1e-4
        tiles.append(tile)
        truth_by_id[tile.id] = truth
    return tiles, truth_by_id


# -- per-tile stages ----------------------------------------------------------

# Worker processes keep loaded checkpoints here so a pool reuses them
# across tiles instead of re-reading files per task.
_MODEL_CACHE: dict = {}


def _models_for(classifier_path: str, denoiser_path: str | None):
    from .models import load_classifier, load_denoiser

    key = (classifier_path, denoiser_path)
    if key not in _MODEL_CACHE:
        classifier = load_classifier(classifier_path)
        denoiser = load_denoiser(denoiser_path) if denoiser_path else None
        _MODEL_CACHE[key] = (classifier, denoiser)
    return _MODEL_CACHE[key]


def process_tile(tile: RasterTile, opts: dict) -> dict:
    """Run one tile through every stage; returns its manifest entry.

    The entry is plain JSON data: stage counters plus the kept masks,
    enough to rebuild detections without touching pixels again.
    """
    from .models import classify_batch, cloud_filter, denoise

    stage = "cloud_filter"
    try:
        classifier, denoiser = _models_for(opts["classifier"], opts.get("denoiser"))
        tau = opts["tau"] if opts["tau"] is not None else classifier.threshold
        if not cloud_filter(tile):
            return {
                "tile": tile.id,
                "skipped_cloud": True,
                "candidates": 0,
                "scored": 0,
                "covered_fraction": 0.0,
                "building_px": 0,
                "masks": [],
            }
        if denoiser is not None:
            stage = "denoise"
            tile = denoise(denoiser, tile)
        stage = "propose"
        result = propose_masks(tile, opts["proposal"])
        entry = {
            "tile": tile.id,
            "skipped_cloud": False,
            "candidates": len(result.masks),
            "scored": 0,
            "covered_fraction": result.covered_fraction,
            "building_px": 0,
            "masks": [],
        }
        if not result.masks:
            return entry
        stage = "classify"
        pixels = np.stack(
            [
                tile.pixels[m.y : m.y + PATCH_SIZE, m.x : m.x + PATCH_SIZE]
                for m in result.masks
            ]
        )
        scores, maps = classify_batch(classifier, pixels)
        scored = [
            (ScoredMask.from_candidate(m, float(scores[i]), center_score_of(maps[i])), i)
            for i, m in enumerate(result.masks)
            if scores[i] >= opts["filter_threshold"]
        ]
        entry["scored"] = len(scored)
        stage = "dedup"
        by_key = {(sm.x, sm.y): i for sm, i in scored}
        kept = [
            m
            for m in dedup_masks([sm for sm, _ in scored], opts["iou"])
            if m.score >= tau
        ]
        building_px = 0
        for m in kept:
            probs = maps[by_key[(m.x, m.y)]]
            building_px += int((probs >= opts["pixel_threshold"]).sum())
        entry["building_px"] = building_px
        entry["masks"] = [
            {
                "x": m.x,
                "y": m.y,
                "score": m.score,
                "center_score": m.center_score,
                "source": m.source,
            }
            for m in kept
        ]
        return entry
    except Exception as exc:
        raise PipelineError(f"stage {stage} failed on tile {tile.id}: {exc}") from exc


def _tile_task(args):
    return process_tile(*args)


# -- the run ------------------------------------------------------------------


def resolve_output_dir(cfg: PipelineConfig) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def _tile_opts(cfg: PipelineConfig) -> dict:
    return {
        "classifier": cfg.classifier,
        "denoiser": cfg.denoiser,
        "proposal": cfg.proposal,
        "tau": cfg.tau,
        "iou": cfg.iou,
        "filter_threshold": cfg.filter_threshold,
        "pixel_threshold": cfg.pixel_threshold,
    }


def _detections_from(entries, tiles_by_id) -> list[Detection]:
    out = []
    for entry in entries:
        tile = tiles_by_id[entry["tile"]]
        for m in entry["masks"]:
            mask = ScoredMask(
                tile_id=entry["tile"],
                x=m["x"],
                y=m["y"],
                score=m["score"],
                center_score=m["center_score"],
                source=m.get("source", "proposal"),
            )
            out.append(Detection.from_mask(mask, tile.transform))
    return out


def _union_bounds(tiles) -> tuple[float, float, float, float]:
    lons, lats = [], []
    for t in tiles:
        for px, py in ((0, 0), (t.width, t.height)):
            lon, lat = t.transform.pixel_to_lonlat(px, py)
            lons.append(lon)
            lats.append(lat)
    return (min(lons), min(lats), max(lons), max(lats))


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute every stage and write all artifacts; returns the report.

    Finished tiles are committed to `manifest.log` as they complete, so
    rerunning after an interrupt skips them and finishes the rest; the
    final artifacts come out byte identical either way. Any stage error
    aborts the run with the stage and tile named, keeping what was
    already committed.
    """
    out = resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    tiles, truth_by_id = build_inputs(cfg)
    if cfg.eval is not None and truth_by_id is None:
        raise PipelineError("evaluation needs generated scenes, not a tile directory")
    if tiles and cfg.classifier is None:
        raise PipelineError("run needs a classifier checkpoint; none configured")

    manifest = JsonLog(out / "manifest.log")
    try:
        done = {}
        for entry in manifest.items():
            done.setdefault(entry["tile"], entry)
        todo = [t for t in tiles if t.id not in done]
        if todo:
            log.info("processing %d of %d tiles", len(todo), len(tiles))
        opts = _tile_opts(cfg)
        if cfg.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                for entry in pool.map(_tile_task, [(t, opts) for t in todo]):
                    manifest.append(entry)
                    done[entry["tile"]] = entry
        else:
            for tile in todo:
                entry = process_tile(tile, opts)
                manifest.append(entry)
                done[entry["tile"]] = entry
    finally:
        manifest.close()

    entries = [done[t.id] for t in tiles]
    tiles_by_id = {t.id: t for t in tiles}
    detections = _detections_from(entries, tiles_by_id)
    processed = [e for e in entries if not e["skipped_cloud"]]

    report = {
        "tiles": {
            "total": len(tiles),
            "processed": len(processed),
            "skipped_cloud": len(entries) - len(processed),
        },
        "candidates": sum(e["candidates"] for e in entries),
        "scored": sum(e["scored"] for e in entries),
        "masks_kept": sum(len(e["masks"]) for e in entries),
        "detections": len(detections),
        "building_px": sum(e["building_px"] for e in entries),
        "reduction_fraction": (
            float(np.mean([e["covered_fraction"] for e in processed]))
            if processed
            else 0.0
        ),
        "per_tile": entries,
        "config": cfg.to_dict(),
    }

    eval_report = None
    if cfg.eval is not None and tiles:
        from .evalstats import evaluate_pipeline
        from .models import load_classifier, load_denoiser

        classifier = load_classifier(cfg.classifier)
        denoiser = load_denoiser(cfg.denoiser) if cfg.denoiser else None
        eval_report = evaluate_pipeline(
            classifier,
            [(t, truth_by_id[t.id]) for t in tiles],
            policy=cfg.eval.policy,
            n=cfg.eval.n,
            seed=cfg.eval.seed,
            negative_skew=cfg.eval.negative_skew,
            denoiser=denoiser,
            params=cfg.proposal,
            iou_threshold=cfg.iou,
        )
        report["eval"] = eval_report.to_dict()

    _write_exports(out, cfg, tiles, detections, eval_report)
    (out / "report.json").write_bytes(_json_bytes(report))
    return report


def _write_exports(out: Path, cfg, tiles, detections, eval_report) -> None:
    (out / "detections.geojson").write_bytes(write_geojson(detections).encode())
    package_kmz(write_kml(detections), out / "detections.kmz")
    if tiles:
        grid = aggregate_density(detections, _union_bounds(tiles), cfg.cell_size)
        write_png_heatmap(grid, out / "density.png")
        package_kmz(
            write_grid_kml(grid, "files/density.png"),
            out / "density.kmz",
            assets={"files/density.png": (out / "density.png").read_bytes()},
        )
    if eval_report is not None:
        (out / "metrics.json").write_bytes(_json_bytes(eval_report.to_dict()))
        (out / "pr.csv").write_bytes(_pr_csv(eval_report).encode())


def _pr_csv(report) -> str:
    lines = ["threshold,precision,recall"]
    curve = report.curve
    if curve is not None:
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            lines.append(f"{float(t)!r},{float(p)!r},{float(r)!r}")
    return "\n".join(lines) + "\n"
