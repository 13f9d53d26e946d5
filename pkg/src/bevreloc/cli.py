"""Command-line entry point.

Subcommands: gen-data, rasterize-osm, train, eval, infer, bench, ablate.
Every command writes a manifest into its output directory recording the
resolved configuration, seeds, and artifact paths.  Exit codes: 0 on
success, 1 on runtime failure, 2 on usage or configuration errors.
The BEVRELOC_DEVICE environment variable selects the default device.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (
    ConfigError,
    load_config,
    loss_weights_from,
    model_config_from,
    registration_config_from,
    train_config_from,
)
from .manifest import RunManifest, write_manifest
from .raster import NoiseSpec
from .se2 import PoseOffset

CHANNEL_NAMES = ("lanes", "buildings", "nodes")


class CliRuntimeError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevreloc",
        description="Neural re-localization against rasterized navigation maps")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--mode", choices=("oracle", "camera"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-translation", type=float, default=30.0)
    p.add_argument("--noise-rotation-deg", type=float, default=30.0)
    p.add_argument("--world-extent", type=float, default=512.0)
    p.add_argument("--world-block", type=float, default=128.0)
    p.add_argument("--world-road-width", type=float, default=8.0)
    p.add_argument("--world-building-density", type=float, default=0.5)
    p.add_argument("--world-node-density", type=float, default=0.5)
    p.add_argument("--world-seed", type=int, default=None,
                   help="defaults to --seed")
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--lane-width", type=float, default=3.0)
    p.add_argument("--node-radius", type=float, default=1.0)
    p.add_argument("--degrade-dropout", type=float, default=0.0)
    p.add_argument("--degrade-occlusion-deg", type=float, default=0.0)
    p.add_argument("--degrade-sectors", type=int, default=0)
    p.add_argument("--degrade-max-range", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("rasterize-osm", help="rasterize an OSM extract into map tiles")
    p.add_argument("--osm", required=True)
    p.add_argument("--center", required=True, help="LAT,LON projection origin")
    p.add_argument("--heading-deg", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", default="lanes,buildings,nodes")
    p.add_argument("--lane-width", type=float, default=3.0)
    p.add_argument("--node-radius", type=float, default=1.0)
    p.set_defaults(func=cmd_rasterize_osm)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="override data.root")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", choices=("noop",), default=None)
    p.add_argument("--channels", default=None,
                   help="comma list of map channels to keep (others zeroed)")
    p.add_argument("--bench", action="store_true", help="also time the forward pass")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run one sample and render an overlay")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", default="infer_out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="latency benchmark of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--batch", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    p.add_argument("--matrix", choices=("map_elements", "loss_terms", "variants"),
                   required=True)
    p.add_argument("--data", required=True, help="evaluation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default=None, help="trained model (map_elements)")
    p.add_argument("--config", default=None, help="training budget (loss_terms/variants)")
    p.add_argument("--train-data", default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def _channel_mask(raw: str | None, parser) -> tuple[bool, bool, bool] | None:
    if raw is None:
        return None
    wanted = [v.strip() for v in raw.split(",") if v.strip()]
    for name in wanted:
        if name not in CHANNEL_NAMES:
            parser.error(f"unknown channel {name!r}; choices: {CHANNEL_NAMES}")
    return tuple(name in wanted for name in CHANNEL_NAMES)


def cmd_gen_data(args, parser) -> int:
    from .camera import default_rig
    from .dataset import DegradationSpec, build_dataset
    from .synthworld import WorldSpec

    if args.count <= 0:
        parser.error("--count must be positive")
    world = WorldSpec(
        extent=args.world_extent, block_size=args.world_block,
        road_width=args.world_road_width,
        building_density=args.world_building_density,
        node_density=args.world_node_density,
        rng_seed=args.seed if args.world_seed is None else args.world_seed)
    noise = NoiseSpec(args.noise_translation,
                      math.radians(args.noise_rotation_deg), args.seed)
    degradation = None
    if args.degrade_dropout > 0 or (args.degrade_sectors > 0
                                    and args.degrade_occlusion_deg > 0) \
            or args.degrade_max_range is not None:
        degradation = DegradationSpec(args.degrade_sectors, args.degrade_occlusion_deg,
                                      args.degrade_dropout, args.degrade_max_range,
                                      args.seed)
    rig = default_rig(args.cameras) if args.mode == "camera" else None

    manifest = RunManifest(command="gen-data", argv=sys.argv[1:],
                           config={"world": world.to_json_dict(),
                                   "noise": noise.to_json_dict(),
                                   "mode": args.mode, "count": args.count,
                                   "lane_width": args.lane_width,
                                   "node_radius": args.node_radius},
                           seeds={"seed": args.seed, "world_seed": world.rng_seed})
    root = build_dataset(world, noise, args.count, args.mode, args.out, rig=rig,
                         degradation=degradation, lane_width=args.lane_width,
                         node_radius=args.node_radius)
    manifest.artifacts = [str(root / "index.json"), str(root / "samples")]
    write_manifest(root, manifest)
    print(f"wrote {args.count} samples to {root}")
    return 0


def cmd_rasterize_osm(args, parser) -> int:
    from .raster import extract_patch
    from .vectormap import parse_osm

    osm_path = Path(args.osm)
    if not osm_path.exists():
        parser.error(f"OSM file not found: {osm_path}")
    try:
        lat, lon = (float(v) for v in args.center.split(","))
    except ValueError:
        parser.error(f"--center must be 'LAT,LON', got {args.center!r}")
    mask = _channel_mask(args.channels, parser) or (True, True, True)

    manifest = RunManifest(command="rasterize-osm", argv=sys.argv[1:],
                           config={"osm": str(osm_path), "center": [lat, lon],
                                   "heading_deg": args.heading_deg,
                                   "channels": list(args.channels.split(","))},
                           seeds={})
    vmap = parse_osm(osm_path.read_bytes(), (lat, lon))
    center = PoseOffset(0.0, 0.0, math.radians(args.heading_deg))
    tile = extract_patch(vmap, center, lane_width=args.lane_width,
                         node_radius=args.node_radius, channel_mask=mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    png, sidecar = tile.save(out / "tile")
    vmap.save_json(out / "vectormap.json")
    manifest.artifacts = [str(png), str(sidecar), str(out / "vectormap.json")]
    write_manifest(out, manifest)
    print(f"rasterized {osm_path} -> {png}")
    return 0


def _load_training_setup(args, parser):
    from .dataset import load_index
    from .training import ArrayDataset

    cfg = load_config(args.config)
    data_root = args.data if getattr(args, "data", None) else cfg.get("data.root")
    if not data_root:
        parser.error("no dataset: set data.root in the config or pass --data")
    if not Path(data_root).exists():
        parser.error(f"dataset not found: {data_root}")
    mode = cfg.get("data.mode") or load_index(data_root)["mode"]
    dataset = ArrayDataset.from_directory(data_root)
    if dataset.mode != mode:
        raise CliRuntimeError(f"config data.mode={mode} but dataset is {dataset.mode}")
    return cfg, data_root, dataset


def cmd_train(args, parser) -> int:
    from .camera import CameraRig
    from .dataset import load_index
    from .models import LocalizationModel
    from .training import train

    cfg, data_root, dataset = _load_training_setup(args, parser)
    model_cfg = model_config_from(cfg, dataset.mode)
    reg_cfg = registration_config_from(cfg)
    train_cfg = train_config_from(cfg)
    weights = loss_weights_from(cfg)

    rig = None
    index = load_index(data_root)
    if dataset.mode == "camera" and index.get("rig"):
        rig = CameraRig.from_json_dict(index["rig"])

    torch.manual_seed(train_cfg.seed)
    model = LocalizationModel(model_cfg, reg_cfg, rig)
    manifest = RunManifest(command="train", argv=sys.argv[1:],
                           config={"file": dict(cfg), "data_root": str(data_root),
                                   "model": model_cfg.to_json_dict(),
                                   "registration": reg_cfg.to_json_dict()},
                           seeds={"train_seed": train_cfg.seed})
    last = train(train_cfg, dataset, model, weights=weights, out_dir=args.out)
    manifest.artifacts = [str(last), str(Path(args.out) / "train_log.jsonl")]
    write_manifest(args.out, manifest)
    print(f"trained {train_cfg.epochs} epochs; checkpoint at {last}")
    return 0


def cmd_eval(args, parser) -> int:
    from .evaluation import (aggregate, bench_latency, evaluate_model, score,
                             write_metrics_json, write_table_csv)
    from .models import load_checkpoint
    from .report import render_error_histogram, render_recall_figure
    from .training import ArrayDataset

    if args.ckpt is None and args.baseline is None:
        parser.error("--ckpt is required unless --baseline is given")
    if not Path(args.data).exists():
        parser.error(f"dataset not found: {args.data}")
    dataset = ArrayDataset.from_directory(args.data)
    mask = _channel_mask(args.channels, parser)

    if args.baseline == "noop":
        identity = PoseOffset(0, 0, 0)
        records = [score(identity, PoseOffset(*map(float, rec["xi1"])))
                   for rec in dataset.records]
        model = None
    else:
        model, _ = load_checkpoint(args.ckpt)
        records = evaluate_model(model, dataset, channel_mask=mask)

    report = aggregate(records)
    if args.bench and model is not None:
        stats = bench_latency(model, dataset)
        report.latency_median_ms = stats["median_ms"]
        report.latency_p95_ms = stats["p95_ms"]
        report.hardware = stats["hardware"]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = write_metrics_json(out / "metrics.json", report,
                                 extra={"baseline": args.baseline,
                                        "channel_mask": mask})
    row = {"cell": args.baseline or "model"}
    for prefix, recalls in (("position", report.position_recall),
                            ("orientation", report.orientation_recall),
                            ("longitudinal", report.longitudinal_recall),
                            ("lateral", report.lateral_recall)):
        row.update({f"{prefix}_recall@{t:g}": v for t, v in sorted(recalls.items())})
    table = write_table_csv(out / "table.csv", [row])
    fig1 = render_recall_figure(report, out / "recall_curves.png")
    fig2 = render_error_histogram(records, out / "error_histogram.png")

    manifest = RunManifest(command="eval", argv=sys.argv[1:],
                           config={"ckpt": args.ckpt, "data": str(args.data),
                                   "baseline": args.baseline, "channel_mask": mask},
                           seeds={})
    manifest.artifacts = [str(p) for p in (metrics, table, fig1, fig2)]
    write_manifest(out, manifest)
    print(json.dumps(report.to_json_dict()["position_recall"]))
    return 0


def cmd_infer(args, parser) -> int:
    from .dataset import load_sample
    from .models import load_checkpoint
    from .report import render_alignment_overlay
    from .training import ArrayDataset

    sample_dir = Path(args.sample)
    if not sample_dir.exists():
        parser.error(f"sample not found: {sample_dir}")
    model, _ = load_checkpoint(args.ckpt)
    sample = load_sample(sample_dir)

    batch = {
        "map_patch": torch.from_numpy(
            sample.map_patch.channels.astype(np.float32))[None],
    }
    observation = sample.oracle_bev
    if model.config.mode == "oracle":
        if observation is None:
            raise CliRuntimeError("oracle-mode checkpoint needs an oracle-mode sample")
        batch["oracle_bev"] = torch.from_numpy(observation.astype(np.float32))[None]
    else:
        if sample.images is None:
            raise CliRuntimeError("camera-mode checkpoint needs a camera-mode sample")
        batch["images"] = torch.from_numpy(
            sample.images.astype(np.float32) / 255.0)[None]
        observation = sample.seg_labels

    model.eval()
    with torch.no_grad():
        out = model(batch)
    xi = PoseOffset(*[float(v) for v in out["xi_total"][0]])
    print(json.dumps(xi.to_json_dict()))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    overlay = render_alignment_overlay(observation, sample.map_patch.channels,
                                       sample.gt_offset, xi, out_dir / "overlay.png",
                                       model.config.bev_spec, model.config.map_spec)
    (out_dir / "prediction.json").write_text(json.dumps({
        "xi_total": xi.to_json_dict(),
        "xi_c": PoseOffset(*[float(v) for v in out["xi_c"][0]]).to_json_dict(),
        "xi_f": PoseOffset(*[float(v) for v in out["xi_f"][0]]).to_json_dict(),
        "gt_offset": sample.gt_offset.to_json_dict(),
    }, sort_keys=True, indent=2) + "\n")
    manifest = RunManifest(command="infer", argv=sys.argv[1:],
                           config={"ckpt": args.ckpt, "sample": str(sample_dir)},
                           seeds={})
    manifest.artifacts = [str(overlay), str(out_dir / "prediction.json")]
    write_manifest(out_dir, manifest)
    return 0


def cmd_bench(args, parser) -> int:
    from .evaluation import bench_latency
    from .models import load_checkpoint
    from .training import ArrayDataset

    model, _ = load_checkpoint(args.ckpt)
    dataset = None
    if args.data:
        dataset = ArrayDataset.from_directory(args.data)
    stats = bench_latency(model, dataset, batch=args.batch,
                          warmup=args.warmup, iters=args.iters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "latency.json").write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n")
    manifest = RunManifest(command="bench", argv=sys.argv[1:],
                           config={"ckpt": args.ckpt, "iters": args.iters,
                                   "warmup": args.warmup, "batch": args.batch},
                           seeds={})
    manifest.artifacts = [str(out / "latency.json")]
    write_manifest(out, manifest)
    print(json.dumps(stats))
    return 0


def cmd_ablate(args, parser) -> int:
    from .evaluation import run_ablation
    from .models import LocalizationModel, load_checkpoint
    from .training import ArrayDataset

    if not Path(args.data).exists():
        parser.error(f"dataset not found: {args.data}")
    dataset = ArrayDataset.from_directory(args.data)

    checkpoints = {}
    budget = train_dataset = factory = None
    if args.matrix == "map_elements":
        if args.ckpt is None:
            parser.error("--ckpt is required for the map_elements matrix")
        model, _ = load_checkpoint(args.ckpt)
        checkpoints["model"] = model
    else:
        if args.config is None or args.train_data is None:
            parser.error(f"--config and --train-data are required for {args.matrix}")
        cfg = load_config(args.config)
        budget = train_config_from(cfg)
        train_dataset = ArrayDataset.from_directory(args.train_data)
        model_cfg = model_config_from(cfg, train_dataset.mode)
        base_reg = registration_config_from(cfg)

        def factory(variant=None):
            from dataclasses import replace

            reg = base_reg if variant is None else replace(base_reg, variant=variant)
            torch.manual_seed(budget.seed)
            return LocalizationModel(model_cfg, reg)

    rows = run_ablation(args.matrix, args.out, dataset, checkpoints=checkpoints,
                        train_budget=budget, train_dataset=train_dataset,
                        model_factory=factory)
    manifest = RunManifest(command="ablate", argv=sys.argv[1:],
                           config={"matrix": args.matrix, "data": str(args.data)},
                           seeds={})
    manifest.artifacts = [str(Path(args.out) / "table.csv")]
    write_manifest(args.out, manifest)
    print(f"{args.matrix}: {len(rows)} rows -> {Path(args.out) / 'table.csv'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args, parser)
    except SystemExit as e:  # parser.error inside a command
        return int(e.code or 0)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 1
        traceback.print_exc()
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
