# =============================================================================
# RUN EVALUATION - pipeline/evaluate.py
# =============================================================================
# Metrics for a finished run directory against a dataset's ground truth:
#   trajectory   ATE RMSE of the tracking and refined trajectories after
#                similarity alignment
#   mesh         accuracy / completion / recall of the extracted mesh
#                (mapped into the ground-truth frame) against mesh.ply
#   views        PSNR / SSIM on the training keyframes
#   novel views  PSNR / SSIM on equally spaced ground-truth frames
# Records are appended to <run>/metrics.jsonl.
# =============================================================================

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from config import PipelineConfig
from errors import AlignmentFailureError, MetricsUndefinedError
from evaluation.image import ImageMetrics, image_metrics
from evaluation.mesh import TriMesh, cull_unobserved, extract_mesh, load_ply, mesh_metrics, save_ply
from evaluation.novel_view import evaluate_views, evaluation_poses
from evaluation.report import METRICS_FILE, write_records
from evaluation.trajectory import ate_rmse, load_tum, trajectory_diameter, umeyama_align
from field.checkpoint import load_checkpoint
from field.rendering import render_image
from pipeline.dataset import load_intrinsics
from pipeline.image_io import load_rgb
from pipeline.keyframes import DUMP_DIR, load_keyframe_dump
from pipeline.runner import CHECKPOINT, INTRINSICS, TRAJ_REFINED, TRAJ_TRACKING

logger = logging.getLogger(__name__)

CULL_SCALE = 0.25  # opacity maps for culling are rendered at this image scale
PRED_MESH = "mesh.ply"
GT_MESH = "mesh.ply"  # inside the dataset directory


# =============================================================================
# TRAJECTORIES
# =============================================================================
def trajectory_metrics(est, gt, with_scale=True):
    """
    Returns:
        ({"ate": ..., "ate_pct_diameter": ..., "scale": ..., "pairs": ...}, Similarity)
    """
    sim, aligned = umeyama_align(est, gt, with_scale)
    ate = ate_rmse(aligned, gt)
    diameter = trajectory_diameter(gt)
    return {
        "ate": ate,
        "ate_pct_diameter": 100.0 * ate / diameter if diameter > 0 else float("nan"),
        "scale": sim.scale,
        "poses": len(est),
    }, sim


def evaluate_trajectory_files(est_path, gt_path, with_scale=True):
    """ATE of one TUM file against another (the `eval --traj` path)."""
    metrics, _ = trajectory_metrics(load_tum(est_path), load_tum(gt_path), with_scale)
    return metrics


# =============================================================================
# MESH
# =============================================================================
def _opacity_maps(field, poses, intr, coarse, fine):
    small = intr.scaled(CULL_SCALE)
    maps = [render_image(field, p, small, coarse, fine, want_normal=False)["opacity"] for p in poses]
    return small, maps


def _transform_mesh(mesh, sim):
    return TriMesh(sim.apply_points(mesh.vertices), mesh.faces, mesh.colors)


def _gt_reference(dataset, gt_mesh, gt_poses, depth_entries):
    """Ground-truth mesh restricted to what the keyframes could see."""
    depths = []
    for entry in depth_entries:
        loaded = None if entry is None else dataset.gt_depth(entry)
        if loaded is None:
            return gt_mesh
        depth, valid = loaded
        depths.append(np.where(valid, depth, np.inf))
    return cull_unobserved(gt_mesh, gt_poses, dataset.intrinsics, depth_maps=depths)


# =============================================================================
# RUN
# =============================================================================
def evaluate_run(run_dir, dataset=None, config=None, write=True):
    """
    Evaluate every artifact of a run that has ground truth to compare with.

    Args:
        run_dir: Directory written by run_pipeline.
        dataset: DatasetStream with ground truth, or None for the
            reference-free metrics (training views only).
        config: PipelineConfig (eval and mapping sections are used).

    Returns:
        Flat {metric: value} row.
    """
    cfg = config or PipelineConfig()
    run_dir = Path(run_dir)
    row, records = {}, []
    gt = dataset.groundtruth if dataset is not None else None

    sims = {}
    for kind, name in (("tracking", TRAJ_TRACKING), ("refined", TRAJ_REFINED)):
        path = run_dir / name
        if gt is None or not path.exists():
            continue
        try:
            metrics, sims[kind] = trajectory_metrics(load_tum(path), gt)
        except (AlignmentFailureError, MetricsUndefinedError) as exc:
            logger.warning("%s trajectory not evaluated: %s", kind, exc)
            continue
        row[f"ate_{kind}"] = metrics["ate"]
        row[f"ate_{kind}_pct"] = metrics["ate_pct_diameter"]
        records.append({"kind": "trajectory", "trajectory": kind, **metrics})

    if not (run_dir / CHECKPOINT).exists():
        logger.warning("no checkpoint in %s, field metrics skipped", run_dir)
        return _finish(run_dir, row, records, write)

    field, poses = load_checkpoint(run_dir / CHECKPOINT)
    intr = load_intrinsics(run_dir / INTRINSICS) if (run_dir / INTRINSICS).exists() else dataset.intrinsics
    mcfg = cfg.mapping
    keyframes = load_keyframe_dump(run_dir / DUMP_DIR) if (run_dir / DUMP_DIR).is_dir() else []
    kf_poses = [poses.get(kf.frame_id, kf.pose) for kf in keyframes]

    # training views
    if keyframes:
        rendered = [
            (render_image(field, pose, intr, mcfg.coarse_samples, mcfg.fine_samples, want_normal=False)["rgb"], kf.image)
            for kf, pose in zip(keyframes, kf_poses)
        ]
        scores = [image_metrics(a, np.asarray(b, dtype=np.float64), cfg.eval.psnr_cap) for a, b in rendered]
        mean = ImageMetrics(float(np.mean([s.psnr for s in scores])), float(np.mean([s.ssim for s in scores])))
        row.update(psnr=mean.psnr, ssim=mean.ssim)
        records.append({"kind": "training_views", "views": len(scores), **mean.as_dict()})

    # mesh
    gt_mesh_path = None if dataset is None else dataset.root / GT_MESH
    mesh = extract_mesh(field, cfg.eval.mesh_resolution)
    if not mesh.is_empty and kf_poses:
        small, maps = _opacity_maps(field, kf_poses, intr, mcfg.coarse_samples, mcfg.fine_samples)
        mesh = cull_unobserved(mesh, kf_poses, small, opacity_maps=maps)
    row["mesh_empty"] = mesh.is_empty
    if not mesh.is_empty:
        save_ply(mesh, run_dir / PRED_MESH)
    if gt_mesh_path is not None and gt_mesh_path.exists() and "refined" in sims and not mesh.is_empty:
        sim = sims["refined"]
        stamps = gt.timestamps
        kf_gt = [int(np.argmin(np.abs(stamps - kf.timestamp))) for kf in keyframes]
        entries = _entries_for(dataset, [kf.timestamp for kf in keyframes])
        reference = _gt_reference(dataset, load_ply(gt_mesh_path), [gt.poses[i] for i in kf_gt], entries)
        try:
            m = mesh_metrics(
                _transform_mesh(mesh, sim), reference, cfg.eval.mesh_samples,
                cfg.eval.recall_threshold, icp=cfg.eval.icp, seed=cfg.run.seed,
            )
            row.update(m.as_dict())
            records.append({"kind": "mesh", "threshold": cfg.eval.recall_threshold, **m.as_dict()})
        except MetricsUndefinedError as exc:
            logger.warning("mesh metrics undefined: %s", exc)

    # novel views
    if gt is not None and "refined" in sims and len(dataset):
        refined = load_tum(run_dir / TRAJ_REFINED)
        index, nv_poses = evaluation_poses(gt, refined, cfg.eval.nvs_frames)
        entries = _entries_for(dataset, gt.timestamps[index])
        pairs = [(p, load_rgb(e.path)) for p, e in zip(nv_poses, entries) if e is not None]
        if pairs:
            mean, _ = evaluate_views(
                field, intr, [p for p, _ in pairs], [img for _, img in pairs],
                mcfg.coarse_samples, mcfg.fine_samples,
            )
            row.update(nvs_psnr=mean.psnr, nvs_ssim=mean.ssim)
            records.append({"kind": "novel_views", "views": len(pairs), **mean.as_dict()})

    return _finish(run_dir, row, records, write)


def _entries_for(dataset, stamps, tolerance=0.02):
    frame_stamps = dataset.timestamps
    out = []
    for t in stamps:
        if frame_stamps.size == 0:
            out.append(None)
            continue
        k = int(np.argmin(np.abs(frame_stamps - t)))
        out.append(dataset.frames[k] if abs(frame_stamps[k] - t) <= tolerance else None)
    return out


def _finish(run_dir, row, records, write):
    if write and records:
        write_records(records, Path(run_dir) / METRICS_FILE)
    return row
