# =============================================================================
# COMMAND LINE - cli.py
# =============================================================================
# `densevo <command>` entry point.
#
# Commands:
#   run      full pipeline (tracking, enhancement, mapping) over a dataset
#   track    tracking and enhancement only
#   map      offline mapping from a keyframe dump
#   mesh     checkpoint -> PLY mesh
#   render   checkpoint + TUM poses -> PNG images
#   eval     ATE between two TUM files, or every metric of a run
#   synth    render a synthetic dataset
#   ablate   alignment-strategy benchmark and loss-ablation sweeps
#   serve    read-only HTTP API over a runs directory
#
# Exit codes: 0 success, 1 runtime failure, 2 usage error.
# =============================================================================

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

import config
from config import STRATEGIES, load_config
from errors import DenseVOError, InvalidArgumentError
from extensions import configure_logging

logger = logging.getLogger("densevo")

SCENES = ("box-room", "box-room-glossy", "plane")


# =============================================================================
# PARSER
# =============================================================================
def build_parser():
    parser = argparse.ArgumentParser(prog="densevo", description="Monocular visual odometry with dense NeRF mapping.")
    parser.add_argument("--config", help="key-value config file")
    parser.add_argument("--seed", type=int, help="random seed (overrides the config)")
    parser.add_argument("--sync", action="store_true", help="run the stages in lockstep")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--log-level", default="INFO", help="logging level")
    parser.add_argument("--desk", action="store_true", help="shrink field and batch for CPU runs")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("run", "full pipeline"), ("track", "tracking and enhancement only")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("dataset", help="dataset directory")
        p.add_argument("--format", dest="fmt", default="tum-rgb", choices=("tum-rgb", "synthetic"))
        p.add_argument("--frames", type=int, default=0, help="stop after this many frames (0 = all)")
        if name == "run":
            p.add_argument("--evaluate", action="store_true", help="evaluate the run when it finishes")

    p = sub.add_parser("map", help="offline mapping from a keyframe dump")
    p.add_argument("run", help="run directory holding a keyframes/ dump")

    p = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--resolution", type=int, default=config.MESH_RESOLUTION)
    p.add_argument("--threshold", type=float, help="density iso level (default ln2 / voxel)")
    p.add_argument("--output", default="mesh.ply")

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("poses", help="TUM trajectory of the views to render")
    p.add_argument("--intrinsics", help="intrinsics file (default: camera section of the config)")
    p.add_argument("--depth", action="store_true", help="also write 16-bit depth PNGs")

    p = sub.add_parser("eval", help="evaluate trajectories or a run")
    p.add_argument("--traj", help="estimated TUM trajectory")
    p.add_argument("--gt", help="ground-truth TUM trajectory")
    p.add_argument("--no-scale", action="store_true", help="rigid instead of similarity alignment")
    p.add_argument("--run", help="run directory to evaluate")
    p.add_argument("--dataset", help="dataset directory with ground truth")
    p.add_argument("--format", dest="fmt", default="synthetic", choices=("tum-rgb", "synthetic"))

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--scene", default="box-room", help=f"one of {', '.join(SCENES)} or a scene file")
    p.add_argument("--frames", type=int, help="frame count (default: the scene's)")

    p = sub.add_parser("ablate", help="alignment and loss ablations")
    p.add_argument("--alignment", action="store_true", help="alignment-strategy benchmark")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.02, help="multiplicative depth noise")
    p.add_argument("--dataset", help="dataset for the loss sweep")
    p.add_argument("--variants", nargs="*", help="loss variants (default: all)")
    p.add_argument("--strategies", nargs="*", choices=STRATEGIES, help="also sweep these alignment strategies")

    p = sub.add_parser("serve", help="serve run artifacts over HTTP")
    p.add_argument("--port", type=int, default=config.API_PORT)
    p.add_argument("--host", default="127.0.0.1")
    return parser


def resolve_config(args):
    """Config file + environment, then the global flags on top."""
    cfg = load_config(args.config)
    if args.desk:
        cfg.desk_scale()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.sync:
        cfg.run.sync = True
    if args.out:
        cfg.run.out_dir = args.out
    return cfg


# =============================================================================
# COMMANDS
# =============================================================================
def cmd_run(args, cfg):
    from evaluation.report import summary_table
    from pipeline.dataset import ingest_dataset
    from pipeline.evaluate import evaluate_run
    from pipeline.runner import run_pipeline

    if args.frames:
        cfg.run.max_frames = args.frames
    dataset = ingest_dataset(args.dataset, args.fmt, cfg.camera)
    artifacts = run_pipeline(cfg, dataset, cfg.run.out_dir, mapping=args.command == "run")
    print(f"{len(artifacts.tracking)} frames, {artifacts.keyframes} keyframes -> {artifacts.out_dir}")
    if getattr(args, "evaluate", False):
        row = evaluate_run(artifacts.out_dir, dataset, cfg)
        print(summary_table([{"run": artifacts.out_dir.name, **row}]))
    return 0


def cmd_map(args, cfg):
    from geometry.camera import Intrinsics
    from pipeline.dataset import load_intrinsics
    from pipeline.keyframes import DUMP_DIR, load_keyframe_dump
    from pipeline.runner import INTRINSICS, map_keyframes

    run = Path(args.run)
    keyframes = load_keyframe_dump(run / DUMP_DIR)
    if not keyframes:
        raise InvalidArgumentError(f"no keyframe dump in {run}")
    intr = load_intrinsics(run / INTRINSICS) if (run / INTRINSICS).exists() else Intrinsics.from_config(cfg.camera)
    out = args.out or str(run / "remap")
    mapper = map_keyframes(cfg, keyframes, intr, out)
    print(f"mapped {len(mapper.database)} keyframes in {mapper.step_count} steps -> {out}")
    return 0


def cmd_mesh(args, cfg):
    from evaluation.mesh import extract_mesh, save_ply
    from field.checkpoint import load_checkpoint

    field, _ = load_checkpoint(args.checkpoint)
    mesh = extract_mesh(field, args.resolution, args.threshold)
    if mesh.is_empty:
        logger.warning("density never crosses the iso level; writing an empty mesh")
    output = Path(args.out) / args.output if args.out else Path(args.output)
    save_ply(mesh, output)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {output}")
    return 0


def cmd_render(args, cfg):
    from evaluation.trajectory import load_tum
    from field.checkpoint import load_checkpoint
    from field.rendering import render_image
    from geometry.camera import Intrinsics
    from pipeline.dataset import load_intrinsics
    from pipeline.image_io import save_depth, save_rgb

    field, _ = load_checkpoint(args.checkpoint)
    intr = load_intrinsics(args.intrinsics) if args.intrinsics else Intrinsics.from_config(cfg.camera)
    traj = load_tum(args.poses)
    out = Path(args.out or "renders")
    out.mkdir(parents=True, exist_ok=True)
    m = cfg.mapping
    for k, (stamp, pose) in enumerate(zip(traj.timestamps, traj.poses)):
        view = render_image(field, pose, intr, m.coarse_samples, m.fine_samples, want_normal=False)
        save_rgb(view["rgb"], out / f"{k:06d}.png")
        if args.depth:
            save_depth(view["depth"], out / f"{k:06d}_depth.png", valid=view["opacity"] > 0.5)
        logger.debug("rendered view %d at t=%.6f", k, stamp)
    print(f"rendered {len(traj)} views -> {out}")
    return 0


def cmd_eval(args, cfg):
    from evaluation.report import summary_table
    from pipeline.evaluate import evaluate_run, evaluate_trajectory_files

    if args.traj or args.gt:
        if not (args.traj and args.gt):
            raise InvalidArgumentError("--traj and --gt go together")
        metrics = evaluate_trajectory_files(args.traj, args.gt, with_scale=not args.no_scale)
        print(summary_table([{"run": Path(args.traj).name, **metrics}]))
        return 0
    if not args.run:
        raise InvalidArgumentError("eval needs --traj/--gt or --run")

    from pipeline.dataset import ingest_dataset

    dataset = ingest_dataset(args.dataset, args.fmt, cfg.camera) if args.dataset else None
    row = evaluate_run(args.run, dataset, cfg)
    print(summary_table([{"run": Path(args.run).name, **row}]))
    return 0


def cmd_synth(args, cfg):
    from geometry.camera import Intrinsics
    from synth.export import export_dataset
    from synth.scene import box_room, load_scene, plane_scene

    if args.scene == "box-room":
        scene = box_room()
    elif args.scene == "box-room-glossy":
        scene = box_room(glossy=True)
    elif args.scene == "plane":
        scene = plane_scene()
    elif Path(args.scene).is_file():
        scene = load_scene(args.scene)
    else:
        raise InvalidArgumentError(f"unknown scene {args.scene!r}")
    out = args.out or str(Path("data") / scene.name)
    path, gt = export_dataset(scene, Intrinsics.from_config(cfg.camera), out, args.frames)
    print(f"{len(gt)} frames of {scene.name} -> {path}")
    return 0


def cmd_ablate(args, cfg):
    from evaluation.report import summary_table
    from geometry.camera import Intrinsics
    from pipeline.ablation import alignment_benchmark, loss_ablation

    if not args.alignment and not args.dataset:
        raise InvalidArgumentError("ablate needs --alignment and/or --dataset")
    if args.alignment:
        rows = alignment_benchmark(
            args.trials, cfg.run.seed, args.noise, Intrinsics.from_config(cfg.camera),
        )
        print(summary_table(rows, ["rmse", "rmse_std", "failures", "trials"], label="strategy"))
    if args.dataset:
        from pipeline.dataset import ingest_dataset

        dataset = ingest_dataset(args.dataset, "synthetic", cfg.camera)
        out = args.out or str(Path("runs") / "ablation")
        rows = loss_ablation(cfg, dataset, out, args.variants, args.strategies)
        print(summary_table(rows))
    return 0


def cmd_serve(args, cfg):
    from app import create_app

    app = create_app(args.out or config.RUNS_ROOT)
    app.run(host=args.host, port=args.port, debug=False)
    return 0


COMMANDS = {
    "run": cmd_run,
    "track": cmd_run,
    "map": cmd_map,
    "mesh": cmd_mesh,
    "render": cmd_render,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
    "serve": cmd_serve,
}


# =============================================================================
# ENTRY POINT
# =============================================================================
def main(argv=None):
    """
    Returns:
        Process exit code.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging(args.log_level)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except DenseVOError as exc:
        print(f"densevo: {exc}", file=sys.stderr)
        return 1
    except (OSError, np.linalg.LinAlgError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"densevo: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
