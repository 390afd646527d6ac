"""Command line front end: scene generation, training, runs, serving.

Every subcommand is a thin shell over one library call so behavior in
scripts matches behavior in tests. Exit codes: 0 on success, 1 when a
command fails, 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .geo import ValidationError
from .pipeline import PipelineConfig, PipelineError, run_pipeline

DEFAULT_STYLES = "A,B,C"


def _styles(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _noise_specs(text: str):
    """Parse `kind:strength[,kind:strength...]` into NoiseSpec objects."""
    from .scene import NoiseSpec

    specs = []
    for part in text.split(","):
        kind, _, strength = part.partition(":")
        specs.append(NoiseSpec(kind=kind.strip(), strength=float(strength or 0.1)))
    return specs


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _harvest(styles, per_style, scene_seed, limit, seed, policy="train"):
    from .benchmark import generate_scenes, harvest_specs, harvest_weak_labels

    scenes = generate_scenes(harvest_specs(styles, per_style=per_style, seed=scene_seed))
    data = harvest_weak_labels(scenes, policy=policy)
    if limit and len(data) > limit:
        rng = np.random.default_rng(seed)
        data = data.subset(rng.permutation(len(data))[:limit])
    return data


# -- subcommands ----------------------------------------------------------------


def cmd_gen_scenes(args) -> int:
    from PIL import Image

    from .scene import SceneSpec, generate_scene, style

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    styles = _styles(args.styles)
    noise = _noise_specs(args.noise)[0] if args.noise else None
    specs = []
    lon = 0.0
    for i in range(args.n):
        spec = SceneSpec(
            width=args.width,
            height=args.height,
            country_style=style(styles[i % len(styles)]),
            building_density=args.density,
            noise=noise,
            rng_seed=args.seed + i,
        )
        tile, truth = generate_scene(spec, tile_id=f"scene_{i:04d}", origin=(lon, 0.0))
        lon += spec.width * 1e-4
        px = np.round(tile.pixels * 255.0).astype(np.uint8)
        Image.fromarray(px, mode="L").save(out / f"{tile.id}.png")
        (out / f"{tile.id}.json").write_text(
            json.dumps(
                {"transform": tile.transform.to_dict(), "meta": tile.meta},
                indent=2,
                sort_keys=True,
            )
        )
        if args.masks:
            mask = (truth.mask * 255).astype(np.uint8)
            Image.fromarray(mask, mode="L").save(out / f"{tile.id}_mask.png")
        specs.append(
            {
                "width": spec.width,
                "height": spec.height,
                "style": spec.country_style.name,
                "building_density": spec.building_density,
                "rng_seed": spec.rng_seed,
            }
        )
    (out / "specs.json").write_text(json.dumps(specs, indent=2, sort_keys=True))
    print(f"wrote {args.n} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    from .models import TrainConfig, save_classifier, train_classifier

    data = _harvest(
        _styles(args.styles), args.per_style, args.scene_seed, args.limit, args.seed
    )
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed)
    model, history = train_classifier(data, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(model, out)
    _write_history(
        Path(args.history) if args.history else out.with_suffix(".history.jsonl"),
        history,
    )
    print(f"trained on {len(data)} patches; final acc {history[-1]['acc']:.3f}; saved {out}")
    return 0


def cmd_fine_tune(args) -> int:
    from .models import TrainConfig, fine_tune, load_classifier, save_classifier

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        print(f"checkpoint not found: {ckpt}", file=sys.stderr)
        return 1
    model = load_classifier(ckpt)
    data = _harvest(
        _styles(args.styles), args.per_style, args.scene_seed, args.limit, args.seed
    )
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed)
    tuned, history = fine_tune(model, data, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(tuned, out)
    _write_history(
        Path(args.history) if args.history else out.with_suffix(".history.jsonl"),
        history,
    )
    print(f"fine-tuned on {len(data)} patches; saved {out}")
    return 0


def cmd_train_denoiser(args) -> int:
    from .benchmark import generate_scenes, harvest_specs
    from .models import TrainConfig, save_denoiser, train_denoiser

    scenes = generate_scenes(
        harvest_specs(_styles(args.styles), per_style=args.per_style, seed=args.scene_seed)
    )
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed)
    model = train_denoiser(
        [t for t, _ in scenes],
        _noise_specs(args.noise),
        cfg,
        windows_per_epoch=args.windows,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_denoiser(model, out)
    print(f"trained denoiser on {len(scenes)} tiles; saved {out}")
    return 0


def _load_config(args) -> PipelineConfig:
    path = Path(args.config)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    raw = json.loads(path.read_text())
    for flag in ("output_dir", "classifier", "denoiser", "tau", "workers"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    return PipelineConfig.from_dict(raw)


def cmd_run(args) -> int:
    report = run_pipeline(_load_config(args))
    print(
        f"{report['tiles']['processed']}/{report['tiles']['total']} tiles, "
        f"{report['detections']} detections, "
        f"reduction {report['reduction_fraction']:.3f}"
    )
    return 0


def cmd_eval(args) -> int:
    from .benchmark import generate_scenes, harvest_specs
    from .evalstats import evaluate_pipeline
    from .models import load_classifier, load_denoiser

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        print(f"checkpoint not found: {ckpt}", file=sys.stderr)
        return 1
    model = load_classifier(ckpt)
    denoiser = None
    if args.denoiser:
        dpath = Path(args.denoiser)
        if not dpath.exists():
            print(f"checkpoint not found: {dpath}", file=sys.stderr)
            return 1
        denoiser = load_denoiser(dpath)
    scenes = generate_scenes(
        harvest_specs(_styles(args.styles), per_style=args.per_style, seed=args.scene_seed)
    )
    report = evaluate_pipeline(
        model,
        scenes,
        policy=args.policy,
        n=args.n,
        seed=args.seed,
        negative_skew=args.skew,
        denoiser=denoiser,
    )
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_export(args) -> int:
    from .pipeline import _detections_from, _write_exports, build_inputs

    run_dir = Path(args.run_dir)
    report_path = run_dir / "report.json"
    if not report_path.exists():
        print(f"no report.json under {run_dir}", file=sys.stderr)
        return 1
    report = json.loads(report_path.read_text())
    cfg_dict = report["config"]
    if args.cell_size is not None:
        cfg_dict["cell_size"] = args.cell_size
    cfg = PipelineConfig.from_dict(cfg_dict)
    tiles, _ = build_inputs(cfg)
    detections = _detections_from(report["per_tile"], {t.id: t for t in tiles})
    _write_exports(run_dir, cfg, tiles, detections, None)
    print(f"rewrote exports for {len(detections)} detections under {run_dir}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .labelstore import LabelStore, TaskQueue, JsonLog
    from .proposal import propose_masks
    from .scene import extract_patch
    from .service import ServiceState, create_app
    from .pipeline import build_inputs

    cfg = _load_config(args)
    store_dir = Path(args.store)
    store_dir.mkdir(parents=True, exist_ok=True)
    tiles, _ = build_inputs(cfg)
    patches = {}
    per_tile_ids: list[str] = []
    for tile in tiles:
        for m in propose_masks(tile, cfg.proposal).masks:
            patch = extract_patch(tile, m.x, m.y)
            patches[patch.key] = patch
            per_tile_ids.append(patch.key)

    run_dir = Path(cfg.output_dir)
    detections = []
    report_path = run_dir / "report.json"
    if report_path.exists():
        from .pipeline import _detections_from

        report = json.loads(report_path.read_text())
        detections = _detections_from(
            report["per_tile"], {t.id: t for t in tiles}
        )
    metrics = None
    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text())

    state = ServiceState(
        store=LabelStore(store_dir / "labels.log"),
        queue=TaskQueue(store_dir / "queue.log"),
        patches=patches,
        tiles={t.id: t for t in tiles},
        detections=detections,
        metrics=metrics,
        triage_log=JsonLog(store_dir / "triage.log"),
    )
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(per_tile_ids))
    for i in order[: args.queue_train]:
        state.queue.enqueue(per_tile_ids[int(i)], "train", source="random")
    for i in order[args.queue_train : args.queue_train + args.queue_test]:
        state.queue.enqueue(per_tile_ids[int(i)], "test", source="random")

    app = create_app(state)
    print(
        f"serving {len(patches)} patches, {len(detections)} detections "
        f"on {args.host}:{args.port}"
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_gradient_check(args) -> int:
    from .tensornet import gradient_check, sweep_configs

    worst = 0.0
    failed = []
    for label, net, x in sweep_configs(args.configs, seed=args.seed):
        rep = gradient_check(net, x, tolerance=args.tolerance, epsilon=args.epsilon)
        worst = max(worst, rep.max_rel_error)
        status = "ok" if rep.passed else "FAIL"
        if not rep.passed:
            failed.append(label)
        if args.verbose or not rep.passed:
            print(f"{label}: {status} (max rel err {rep.max_rel_error:.3e})")
    print(
        f"{args.configs - len(failed)}/{args.configs} configs passed, "
        f"worst rel err {worst:.3e}, tolerance {args.tolerance:.0e}"
    )
    return 1 if failed else 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="satdetect",
        description="Building detection on synthetic satellite scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="render scenes to PNG tiles with sidecars")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--styles", default=DEFAULT_STYLES)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--density", type=float, default=12.0)
    p.add_argument("--noise", default=None, help="kind:strength")
    p.add_argument("--masks", action="store_true", help="also write truth masks")
    p.add_argument("--seed", type=int, default=7000)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", help="train the patch classifier on weak labels")
    p.add_argument("--out", required=True)
    p.add_argument("--styles", default=DEFAULT_STYLES)
    p.add_argument("--per-style", type=int, default=11)
    p.add_argument("--scene-seed", type=int, default=7000)
    p.add_argument("--limit", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--history", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fine-tune", help="specialize a trained classifier")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--styles", default="C")
    p.add_argument("--per-style", type=int, default=8)
    p.add_argument("--scene-seed", type=int, default=7300)
    p.add_argument("--limit", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=13)
    p.add_argument("--history", default=None)
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("train-denoiser", help="train the tile denoiser")
    p.add_argument("--out", required=True)
    p.add_argument("--styles", default=DEFAULT_STYLES)
    p.add_argument("--per-style", type=int, default=2)
    p.add_argument("--scene-seed", type=int, default=7600)
    p.add_argument("--noise", default="gaussian:0.1")
    p.add_argument("--windows", type=int, default=512)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=2)
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("run", help="run the full detection pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", dest="output_dir", default=None)
    p.add_argument("--classifier", default=None)
    p.add_argument("--denoiser", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a checkpoint on fresh scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--denoiser", default=None)
    p.add_argument("--styles", default=DEFAULT_STYLES)
    p.add_argument("--per-style", type=int, default=10)
    p.add_argument("--scene-seed", type=int, default=8000)
    p.add_argument("--policy", default="proposal_conditioned")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--skew", type=float, default=0.93)
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="rewrite exports from a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--cell-size", type=float, default=None)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("serve", help="serve the labeling and triage API")
    p.add_argument("--config", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--queue-train", type=int, default=40)
    p.add_argument("--queue-test", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", dest="output_dir", default=None)
    p.add_argument("--classifier", default=None)
    p.add_argument("--denoiser", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("gradient-check", help="verify every layer's backward pass")
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradient_check)

    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValidationError, PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
