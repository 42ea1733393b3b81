# =============================================================================
# ORACLE PROVIDERS - synth/oracles.py
# =============================================================================
# Stand-ins for the learned networks, built from the scene ground truth:
#
#   flow oracle   delta = GT reprojection - current reprojection + noise
#                 psi   = 1 / (sigma^2 + eps) per axis,
#                         0 for occluded or out-of-view correspondences
#   prior oracle  depth   = (a * GT + b) * (1 + N(0, sigma_d))
#                 normals = GT rotated by a random axis with angle N(0, sigma_n)
#
# Both are deterministic for a fixed seed: every call derives its generator
# from (seed, frame ids) instead of drawing from a shared stream.
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from enhancement.depth import DepthMap, NormalMap
from errors import InvalidArgumentError
from geometry.patch import reproject_points, relative_transform
from synth.render import depth_at, render_groundtruth

logger = logging.getLogger(__name__)

OCCLUSION_TOLERANCE = 0.02  # relative depth disagreement that marks occlusion
PIXEL_VARIANCE_FLOOR = 1e-4  # px^2, psi tops out at 1 / eps for exact flow


@dataclass
class OracleNoise:
    pixel_sigma: float = 0.0
    depth_scale: float = 1.0  # a
    depth_shift: float = 0.0  # b
    depth_sigma: float = 0.0
    normal_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.pixel_sigma, self.depth_sigma, self.normal_sigma) < 0:
            raise InvalidArgumentError("noise levels must be non-negative")
        if self.depth_scale <= 0:
            raise InvalidArgumentError("depth scale must be positive")

    @classmethod
    def from_config(cls, oracle, seed=0):
        return cls(
            oracle.pixel_sigma, oracle.depth_scale, oracle.depth_shift,
            oracle.depth_sigma, oracle.normal_sigma, seed,
        )


def _rng(seed, *keys):
    return np.random.default_rng([seed, *[int(k) & 0x7FFFFFFF for k in keys]])


# =============================================================================
# CORRESPONDENCES
# =============================================================================
class FlowOracle:
    """
    CorrespondenceProvider answering from GT poses and GT scene depth.

    Args:
        scene: SceneSpec.
        gt_poses: Sequence or mapping frame id -> world-to-camera Pose.
        intr: Intrinsics.
        noise: OracleNoise.
    """

    def __init__(self, scene, gt_poses, intr, noise=None):
        self.scene = scene
        self.gt_poses = gt_poses
        self.intr = intr
        self.noise = noise or OracleNoise()
        self.calls = 0

    def confidence(self):
        sigma = self.noise.pixel_sigma
        return 1.0 / (sigma * sigma + PIXEL_VARIANCE_FLOOR)

    def __call__(self, graph, images):
        E = graph.num_edges
        delta = np.zeros((E, 2))
        psi = np.zeros((E, 2))
        self.calls += 1
        if E == 0:
            return delta, psi
        current, ok_now = graph.reproject_edges(self.intr)
        centers = graph.patch_centers()[graph.edge_patch]
        src = graph.edge_source()
        dst = graph.edge_target

        for i in np.unique(src):
            pose_i = self.gt_poses[int(i)]
            rows = np.flatnonzero(src == i)
            z_i = depth_at(self.scene, pose_i, self.intr, centers[rows])
            for j in np.unique(dst[rows]):
                sel = rows[dst[rows] == j]
                z = z_i[np.searchsorted(rows, sel)]
                pose_j = self.gt_poses[int(j)]
                seen = np.isfinite(z) & (z > 0)
                goal = np.full((sel.size, 2), np.nan)
                visible = np.zeros(sel.size, dtype=bool)
                if np.any(seen):
                    R_i, t_i = pose_i.rotation_matrix()[None], pose_i.translation[None]
                    R_j, t_j = pose_j.rotation_matrix()[None], pose_j.translation[None]
                    R_ij, t_ij = relative_transform(R_i, t_i, R_j, t_j)
                    c = centers[sel][seen]
                    n = c.shape[0]
                    px, valid = reproject_points(
                        c[:, 0], c[:, 1], 1.0 / z[seen],
                        np.repeat(R_ij, n, axis=0), np.repeat(t_ij, n, axis=0), self.intr,
                    )
                    inside = valid & self.intr.contains(px[:, 0], px[:, 1])
                    # occlusion: the GT surface seen from j must be the same point
                    x_world = pose_i.inverse().apply(self._lift(c, z[seen]))
                    z_expected = pose_j.apply(x_world)[:, 2]
                    z_seen = np.full(n, np.inf)
                    if np.any(inside):
                        z_seen[inside] = depth_at(self.scene, pose_j, self.intr, px[inside])
                    unoccluded = np.abs(z_seen - z_expected) <= OCCLUSION_TOLERANCE * np.abs(z_expected)
                    keep = inside & unoccluded
                    idx = np.flatnonzero(seen)
                    goal[idx[keep]] = px[keep]
                    visible[idx[keep]] = True
                usable = visible & ok_now[sel]
                rows_ok = sel[usable]
                delta[rows_ok] = goal[usable] - current[rows_ok]
                psi[rows_ok] = self.confidence()

        if self.noise.pixel_sigma > 0:
            rng = _rng(self.noise.seed, 1, graph.frame_ids[-1], self.calls)
            delta += rng.normal(0.0, self.noise.pixel_sigma, size=delta.shape) * (psi > 0)
        return delta, psi

    def _lift(self, pixels, z):
        xn, yn = self.intr.normalized(pixels[:, 0], pixels[:, 1])
        return np.stack([xn * z, yn * z, z], axis=1)


def make_flow_oracle(scene, noise, gt_poses, intr):
    return FlowOracle(scene, gt_poses, intr, noise)


# =============================================================================
# DEPTH / NORMAL PRIORS
# =============================================================================
def perturb_normals(normals, sigma, rng):
    """Rotate each normal about a random axis by an angle drawn from N(0, sigma)."""
    flat = normals.reshape(-1, 3)
    if sigma == 0:
        return normals.copy()
    axes = rng.normal(size=flat.shape)
    axes /= np.maximum(np.linalg.norm(axes, axis=1, keepdims=True), 1e-12)
    angles = rng.normal(0.0, sigma, size=flat.shape[0])
    rotated = Rotation.from_rotvec(axes * angles[:, None]).apply(flat)
    norm = np.linalg.norm(rotated, axis=1, keepdims=True)
    rotated = np.where(norm > 0, rotated / np.where(norm > 0, norm, 1.0), 0.0)
    return rotated.reshape(normals.shape)


class PriorOracle:
    """PriorProvider returning skewed, noisy GT depth and normals for a frame id."""

    def __init__(self, scene, gt_poses, intr, noise=None):
        self.scene = scene
        self.gt_poses = gt_poses
        self.intr = intr
        self.noise = noise or OracleNoise()

    def __call__(self, image, frame_id=None):
        if frame_id is None:
            raise InvalidArgumentError("the prior oracle needs the frame id")
        view = render_groundtruth(self.scene, self.gt_poses[int(frame_id)], self.intr)
        rng = _rng(self.noise.seed, 2, frame_id)
        nz = self.noise
        depth = nz.depth_scale * view.depth + nz.depth_shift
        if nz.depth_sigma > 0:
            depth = depth * (1.0 + rng.normal(0.0, nz.depth_sigma, size=depth.shape))
        normals = perturb_normals(view.normals, nz.normal_sigma, rng)
        # background keeps a unit normal facing the camera
        normals[~view.hit] = (0.0, 0.0, -1.0)
        return DepthMap(depth, mask=view.hit), NormalMap(normals)


def make_prior_oracle(scene, noise, gt_poses, intr):
    return PriorOracle(scene, gt_poses, intr, noise)
