# =============================================================================
# DATASET EXPORT - synth/export.py
# =============================================================================
# Writes a synthetic scene as a TUM-style dataset directory:
#
#   rgb.txt            "timestamp rgb/000000.png" per frame
#   rgb/               color PNGs
#   depth.txt, depth/  ground-truth z-depth PNGs (evaluation only)
#   groundtruth.txt    TUM trajectory
#   intrinsics.txt     "fx fy cx cy width height"
#   scene.env          the scene description
#   mesh.ply           ground-truth surface
# =============================================================================

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from evaluation.mesh import save_ply, scene_mesh
from evaluation.trajectory import Trajectory, save_tum
from pipeline.dataset import save_intrinsics
from pipeline.image_io import save_depth, save_rgb
from synth.render import render_groundtruth
from synth.scene import save_scene, scene_trajectory

logger = logging.getLogger(__name__)

FRAME_RATE = 30.0


def export_dataset(scene, intr, out_dir, frames=None, frame_rate=FRAME_RATE):
    """
    Render every trajectory frame of `scene` and write the dataset files.

    Returns:
        (output Path, ground-truth Trajectory)
    """
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    poses = scene_trajectory(scene, frames)
    stamps = np.arange(len(poses)) / frame_rate

    rgb_lines = ["# timestamp filename"]
    depth_lines = ["# timestamp filename"]
    for k, (stamp, pose) in enumerate(zip(stamps, poses)):
        view = render_groundtruth(scene, pose, intr)
        name = f"{k:06d}.png"
        save_rgb(view.rgb, out / "rgb" / name)
        save_depth(view.depth, out / "depth" / name, valid=view.hit)
        rgb_lines.append(f"{stamp:.6f} rgb/{name}")
        depth_lines.append(f"{stamp:.6f} depth/{name}")

    (out / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    gt = Trajectory(stamps, poses)
    save_tum(gt, out / "groundtruth.txt", header=f"ground truth of {scene.name}")
    save_intrinsics(intr, out / "intrinsics.txt")
    save_scene(scene, out / "scene.env")
    save_ply(scene_mesh(scene), out / "mesh.ply")
    logger.info("exported %d frames of %s to %s", len(poses), scene.name, out)
    return out, gt
