# =============================================================================
# GROUND-TRUTH RENDERING - synth/render.py
# =============================================================================
# Exact per-pixel ray casting of a SceneSpec. Shading is unlit textured
# albedo; glossy scenes add a Phong lobe from a fixed light direction so
# color depends on the view direction.
# =============================================================================

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from geometry.camera import Intrinsics

LIGHT_DIRECTION = np.array([0.3, -0.4, 0.866])
PHONG_STRENGTH = 0.35
PHONG_EXPONENT = 24.0


@dataclass
class GroundTruthView:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) z-depth, far plane on background
    normals: np.ndarray  # (H, W, 3) camera frame, facing the camera
    hit: np.ndarray  # (H, W) False on background
    primitive: np.ndarray  # (H, W) primitive index, -1 on background


def cast_rays(scene, origins, dirs):
    """
    Nearest surface along world rays.

    Returns:
        distance (N,), world normals (N, 3), primitive index (N,)
    """
    best = np.full(origins.shape[0], np.inf)
    normals = np.zeros_like(dirs)
    index = np.full(origins.shape[0], -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        t, n = prim.intersect(origins, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        normals[closer] = n[closer]
        index[closer] = k
    return best, normals, index


def shade(scene, points, normals, dirs, index):
    """Albedo (plus an optional specular lobe) for hit points."""
    rgb = np.zeros_like(points)
    for k in np.unique(index):
        if k < 0:
            continue
        sel = index == k
        rgb[sel] = scene.albedo(int(k), points[sel])
    if scene.glossy:
        light = LIGHT_DIRECTION / np.linalg.norm(LIGHT_DIRECTION)
        reflect = 2.0 * (normals @ light)[:, None] * normals - light
        lobe = np.maximum(np.sum(reflect * -dirs, axis=1), 0.0) ** PHONG_EXPONENT
        rgb = rgb + PHONG_STRENGTH * lobe[:, None] * (index >= 0)[:, None]
    return np.clip(rgb, 0.0, 1.0)


def render_groundtruth(scene, pose, intr):
    """
    Render RGB, z-depth and camera-frame normals for a world-to-camera pose.

    Args:
        scene: SceneSpec.
        pose: Pose.
        intr: Intrinsics.

    Returns:
        GroundTruthView
    """
    if not isinstance(intr, Intrinsics):
        raise TypeError("intr must be Intrinsics")
    u, v = intr.pixel_grid()
    xn, yn = intr.normalized(u.ravel(), v.ravel())
    d_cam = np.stack([xn, yn, np.ones_like(xn)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    R = pose.rotation_matrix()
    dirs = d_cam @ R
    origins = np.broadcast_to(pose.center, dirs.shape)

    dist, n_world, index = cast_rays(scene, origins, dirs)
    hit = np.isfinite(dist) & (dist * d_cam[:, 2] < scene.far)
    dist = np.where(hit, dist, 0.0)
    index = np.where(hit, index, -1)
    points = origins + dist[:, None] * dirs

    # normals face the camera
    flip = np.sum(n_world * dirs, axis=1) > 0
    n_world = np.where(flip[:, None], -n_world, n_world)
    rgb = shade(scene, points, n_world, dirs, index)
    n_cam = n_world @ R.T
    depth = np.where(hit, dist * d_cam[:, 2], scene.far)
    n_cam = np.where(hit[:, None], n_cam, 0.0)

    H, W = intr.height, intr.width
    return GroundTruthView(
        rgb=rgb.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        normals=n_cam.reshape(H, W, 3),
        hit=hit.reshape(H, W),
        primitive=index.reshape(H, W),
    )


def depth_at(scene, pose, intr, pixels):
    """GT z-depth at arbitrary (N, 2) pixel positions (inf on background)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    xn, yn = intr.normalized(pixels[:, 0], pixels[:, 1])
    d_cam = np.stack([xn, yn, np.ones_like(xn)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    R = pose.rotation_matrix()
    dirs = d_cam @ R
    dist, _, _ = cast_rays(scene, np.broadcast_to(pose.center, dirs.shape), dirs)
    return dist * d_cam[:, 2]
