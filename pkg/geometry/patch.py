# =============================================================================
# PATCH REPROJECTION - geometry/patch.py
# =============================================================================
# Square image patches with a single inverse depth, and the reprojection
# kernel r ~ K T_j T_i^-1 K^-1 P shared by the tracker, the flow oracle and
# the keyframe policy. All batched kernels take relative transforms
# (R_ij, t_ij) so callers can reuse them across edges.
# =============================================================================

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from errors import InvalidArgumentError
from geometry.lie import hat_batch


# =============================================================================
# PATCH
# =============================================================================
@dataclass(frozen=True)
class Patch:
    frame_id: int
    pixel_us: np.ndarray
    pixel_vs: np.ndarray
    inv_depth: float

    def __post_init__(self):
        us = np.asarray(self.pixel_us, dtype=np.float64).ravel()
        vs = np.asarray(self.pixel_vs, dtype=np.float64).ravel()
        if us.shape != vs.shape:
            raise InvalidArgumentError("pixel_us and pixel_vs must have the same length")
        side = int(round(np.sqrt(us.size)))
        if side * side != us.size or side == 0:
            raise InvalidArgumentError("patch must hold s*s pixels")
        if not self.inv_depth > 0:
            raise InvalidArgumentError("patch inverse depth must be positive")
        object.__setattr__(self, "pixel_us", us)
        object.__setattr__(self, "pixel_vs", vs)
        object.__setattr__(self, "inv_depth", float(self.inv_depth))

    @classmethod
    def centered(cls, frame_id, u, v, size, inv_depth):
        """s x s axis-aligned grid centered on (u, v), row-major."""
        r = size // 2
        offsets = np.arange(-r, r + 1, dtype=np.float64)
        dv, du = np.meshgrid(offsets, offsets, indexing="ij")
        return cls(frame_id, u + du.ravel(), v + dv.ravel(), inv_depth)

    @property
    def size(self):
        return int(round(np.sqrt(self.pixel_us.size)))

    @property
    def center(self):
        mid = self.pixel_us.size // 2
        return np.array([self.pixel_us[mid], self.pixel_vs[mid]])

    def with_inv_depth(self, inv_depth):
        return replace(self, inv_depth=inv_depth)

    def inside(self, intr):
        return bool(np.all(intr.contains(self.pixel_us, self.pixel_vs)))


# =============================================================================
# BATCHED KERNELS
# =============================================================================
def relative_transform(R_i, t_i, R_j, t_j):
    """T_ij = T_j T_i^-1 for batched world-to-camera rotations/translations."""
    R_ij = R_j @ np.swapaxes(R_i, -1, -2)
    t_ij = t_j - np.einsum("...ab,...b->...a", R_ij, t_i)
    return R_ij, t_ij


def transform_homogeneous(xn, yn, d, R_ij, t_ij):
    """
    Apply T_ij to homogeneous points [x_n, y_n, 1, d].

    Returns the 3-vector P = R_ij (x_n, y_n, 1) + t_ij d, which is the
    frame-j point scaled by d. Projection divides out the scale.
    """
    bar = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    return np.einsum("...ab,...b->...a", R_ij, bar) + t_ij * np.asarray(d)[..., None]


def project_homogeneous(P, intr):
    """Pixels and validity mask (z > 0) for scaled points P; invalid pixels are NaN."""
    z = P[..., 2]
    valid = z > 0
    safe_z = np.where(valid, z, 1.0)
    u = intr.fx * P[..., 0] / safe_z + intr.cx
    v = intr.fy * P[..., 1] / safe_z + intr.cy
    pix = np.stack([u, v], axis=-1)
    pix[~valid] = np.nan
    return pix, valid


def reproject_points(us, vs, inv_depths, R_ij, t_ij, intr):
    """Reproject pixels (with inverse depth) from frame i into frame j."""
    xn, yn = intr.normalized(us, vs)
    P = transform_homogeneous(xn, yn, inv_depths, R_ij, t_ij)
    return project_homogeneous(P, intr)


def reproject_patch(patch, pose_i, pose_j, intr):
    """
    Reproject every pixel of a patch from frame i into frame j.

    Args:
        patch: Patch with inv_depth > 0.
        pose_i, pose_j: world-to-camera Poses of source and target frames.
        intr: Intrinsics.

    Returns:
        (pixels, valid): (s*s, 2) pixel array and (s*s,) mask. Pixels that
        land at or behind the target camera are NaN and flagged invalid.
    """
    if not patch.inv_depth > 0:
        raise InvalidArgumentError("patch inverse depth must be positive")
    R_ij, t_ij = relative_transform(
        pose_i.rotation_matrix(), pose_i.translation,
        pose_j.rotation_matrix(), pose_j.translation,
    )
    d = np.full(patch.pixel_us.shape, patch.inv_depth)
    return reproject_points(patch.pixel_us, patch.pixel_vs, d, R_ij, t_ij, intr)


# =============================================================================
# JACOBIANS
# =============================================================================
def reprojection_jacobians(xn, yn, d, R_ij, t_ij, intr):
    """
    Reprojection and its derivatives for a batch of points.

    Pose perturbations are left-multiplicative twists (v, omega) on the
    world-to-camera poses T_i and T_j.

    Args:
        xn, yn, d: (N,) normalized coordinates and inverse depths.
        R_ij, t_ij: (N, 3, 3) and (N, 3) relative transforms.
        intr: Intrinsics.

    Returns:
        pix (N, 2), J_i (N, 2, 6), J_j (N, 2, 6), J_d (N, 2), valid (N,)
    """
    P = transform_homogeneous(xn, yn, d, R_ij, t_ij)
    pix, valid = project_homogeneous(P, intr)
    n = P.shape[0]

    X, Y = P[:, 0], P[:, 1]
    Z = np.where(valid, P[:, 2], 1.0)
    J_proj = np.zeros((n, 2, 3))
    J_proj[:, 0, 0] = intr.fx / Z
    J_proj[:, 0, 2] = -intr.fx * X / Z**2
    J_proj[:, 1, 1] = intr.fy / Z
    J_proj[:, 1, 2] = -intr.fy * Y / Z**2

    # dP / d(xi_j) = [d I, -[P]x]
    J_point = np.zeros((n, 3, 6))
    J_point[:, :, :3] = np.eye(3)[None] * np.asarray(d)[:, None, None]
    J_point[:, :, 3:] = -hat_batch(P)

    # T_ij(exp(xi_i) T_i) = exp(-Ad(T_ij) xi_i) T_ij
    Ad = np.zeros((n, 6, 6))
    Ad[:, :3, :3] = R_ij
    Ad[:, :3, 3:] = hat_batch(t_ij) @ R_ij
    Ad[:, 3:, 3:] = R_ij

    J_j = J_proj @ J_point
    J_i = -(J_j @ Ad)
    J_d = np.einsum("nab,nb->na", J_proj, t_ij)

    J_i[~valid] = 0.0
    J_j[~valid] = 0.0
    J_d[~valid] = 0.0
    return pix, J_i, J_j, J_d, valid
