"""Command-line surface: data generation, pooling, training, probing,
and the gradient-check oracle.

Exit codes: 0 success, 1 runtime/numerical failure, 2 usage or
configuration error. Every command is deterministic given its config,
and commands that produce artifacts echo the fully resolved
configuration into the output directory.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checks
from .config import RunConfig, format_run_config, load_run_config
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    NoRegionsError,
    NumericalError,
    PointCloudFormatError,
    PointCloudParseError,
)
from .nnet.layers import init_lidar_params
from .pipeline import (
    derive_seed,
    distill_rad,
    linear_probe,
    load_stage1_checkpoint,
    make_features_fn,
    pretrain_prc,
    save_stage1_checkpoint,
    save_stage2_checkpoint,
    write_metrics_jsonl,
)
from .pooling import pool_semantics, remove_ground
from .scenegen import LabeledScene, generate_scene, load_point_cloud, save_point_cloud

SCENE_SALT = 100


def _echo_config(rc: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_run_config(rc))


def _load_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "data", None) is not None:
        overrides["data_dir"] = args.data
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    return load_run_config(getattr(args, "config", None), overrides)


def _scene_seed(master: int, index: int) -> int:
    return derive_seed(master, SCENE_SALT, index)


def load_dataset(data_dir: str) -> list[LabeledScene]:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"data_dir: no manifest.json under {data_dir}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    scenes = []
    for entry in manifest["scenes"]:
        points, _ = load_point_cloud(os.path.join(data_dir, entry["points"]))
        labels = np.loadtxt(os.path.join(data_dir, entry["labels"]), dtype=np.int64, ndmin=1)
        scenes.append(LabeledScene(points, labels))
    return scenes


def cmd_gen_data(args) -> int:
    rc = _load_config(args)
    out_dir = rc.out_dir or "."
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_test")
        with open(probe, "w", encoding="utf-8"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"out_dir: not writable ({exc})") from exc

    entries = []
    for i in range(rc.n_scenes):
        seed = _scene_seed(rc.train.seed, i)
        scene = generate_scene(rc.scene, seed)
        points_name = f"scene_{i:03d}.csv"
        labels_name = f"scene_{i:03d}_labels.csv"
        save_point_cloud(scene.points, None, os.path.join(out_dir, points_name))
        np.savetxt(os.path.join(out_dir, labels_name), scene.true_membership, fmt="%d")
        entries.append({"points": points_name, "labels": labels_name, "seed": seed})
    manifest = {"master_seed": rc.train.seed, "n_scenes": rc.n_scenes, "scenes": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    _echo_config(rc, out_dir)
    print(f"wrote {rc.n_scenes} scenes to {out_dir}")
    return 0


def cmd_pool(args) -> int:
    rc = _load_config(args)
    points, _ = load_point_cloud(args.input)
    tpc, stats = pool_semantics(points, rc.pool, rc.train.seed)
    ground = remove_ground(points, rc.pool, rc.train.seed)
    print(f"regions: {stats.n_regions}")
    for rid, count in enumerate(stats.points_per_region):
        print(f"region {rid}: {count} points")
    print(f"ground fraction: {ground.mean():.4f}")
    if args.out:
        save_point_cloud(tpc.points, tpc.tags, args.out)
    return 0


def cmd_pretrain(args) -> int:
    rc = _load_config(args)
    if not rc.data_dir:
        raise ConfigError("data_dir: required (use --data or the config file)")
    out_dir = rc.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(rc.data_dir)
    lidar, (proj_plrc, proj_rapc), metrics = pretrain_prc(
        dataset, rc.train, rc.contrast, rc.pool, rc.model
    )
    ckpt_path = rc.checkpoint_out or os.path.join(out_dir, "stage1.json")
    save_stage1_checkpoint(ckpt_path, lidar, proj_plrc, proj_rapc)
    metrics_path = rc.metrics_out or os.path.join(out_dir, "metrics_prc.jsonl")
    write_metrics_jsonl(metrics_path, metrics)
    _echo_config(rc, out_dir)
    if metrics:
        print(f"final loss: {metrics[-1].loss_total:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_distill(args) -> int:
    rc = _load_config(args)
    if not rc.data_dir:
        raise ConfigError("data_dir: required (use --data or the config file)")
    out_dir = rc.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(rc.data_dir)
    rc.train.stage = "rad"
    camera, proj_rad, metrics = distill_rad(
        dataset, args.lidar_checkpoint, rc.train, rc.rad, rc.pool, rc.model
    )
    ckpt_path = rc.checkpoint_out or os.path.join(out_dir, "stage2.json")
    save_stage2_checkpoint(ckpt_path, camera, proj_rad)
    metrics_path = rc.metrics_out or os.path.join(out_dir, "metrics_rad.jsonl")
    write_metrics_jsonl(metrics_path, metrics)
    _echo_config(rc, out_dir)
    if metrics:
        print(f"final loss: {metrics[-1].loss_total:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_probe(args) -> int:
    rc = _load_config(args)
    if not rc.data_dir:
        raise ConfigError("data_dir: required (use --data or the config file)")
    dataset = load_dataset(rc.data_dir)
    grid = rc.model.grid()
    if args.checkpoint:
        lidar, _, _ = load_stage1_checkpoint(args.checkpoint)
        source = args.checkpoint
    else:
        rng = np.random.default_rng([rc.train.seed, 105])
        lidar = init_lidar_params(rc.model.lidar_channels, rc.model.point_hidden, rng)
        source = "random initialization"
    acc = linear_probe(make_features_fn(lidar, grid), dataset, rc.train.seed, grid)
    print(f"features: {source}")
    print(f"accuracy={acc:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = list(range(args.seeds))
    start = time.time()
    results = checks.run_default_gradcheck(seeds, eps=args.eps, tolerance=args.tolerance)
    failed = False
    by_graph: dict[str, float] = {}
    for name, seed, report in results:
        worst = report.worst()
        by_graph[name] = max(by_graph.get(name, 0.0), report.max_rel_err)
        status = "ok" if report.passed else "FAIL"
        print(
            f"{name} seed={seed}: max_rel_err={report.max_rel_err:.3e} "
            f"(param {worst.name}, coord {worst.worst_coord}) {status}"
        )
        if not report.passed:
            failed = True
    print(f"-- worst per graph (tolerance {args.tolerance:g}) --")
    for name, err in by_graph.items():
        print(f"{name}: {err:.3e}")
    print(f"elapsed: {time.time() - start:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevcontrast",
        description="Two-stage contrastive BEV pretraining on synthetic point clouds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="generate a labeled synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pool", help="semantic pooling of one point-cloud file")
    common(p)
    p.add_argument("--input", required=True, help="input point-cloud CSV")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("pretrain", help="stage 1: contrastive LiDAR pretraining")
    common(p)
    p.add_argument("--data", help="dataset directory from gen-data")
    p.add_argument("--steps", type=int, help="override training steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", help="stage 2: distill into the camera branch")
    common(p)
    p.add_argument("--data", help="dataset directory from gen-data")
    p.add_argument("--steps", type=int, help="override training steps")
    p.add_argument("--lidar-checkpoint", required=True, help="stage-1 checkpoint path")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("probe", help="linear probe of frozen BEV features")
    common(p)
    p.add_argument("--data", help="dataset directory from gen-data")
    p.add_argument("--checkpoint", help="stage-1 checkpoint (omit for random init)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of all default graphs")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per graph")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigError, PointCloudParseError, PointCloudFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, CheckpointError, NoRegionsError, ContractError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
