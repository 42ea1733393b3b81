# =============================================================================
# TRAJECTORY EVALUATION - evaluation/trajectory.py
# =============================================================================
# TUM trajectory I/O, timestamp association, Kabsch-Umeyama similarity
# alignment and ATE RMSE.
#
# TUM lines are "timestamp tx ty tz qx qy qz qw" with the camera pose in the
# world (camera-to-world). Trajectories hold world-to-camera Poses like the
# rest of the toolkit; conversion happens at the file boundary.
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from errors import AlignmentFailureError, InvalidArgumentError, ManifestParseError, MetricsUndefinedError
from geometry.lie import Pose

logger = logging.getLogger(__name__)

ASSOCIATION_TOLERANCE = 0.02  # seconds
COLLINEAR_RATIO = 1e-9


# =============================================================================
# TYPES
# =============================================================================
@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list  # world-to-camera Pose per timestamp

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).ravel()
        if self.timestamps.size != len(self.poses):
            raise InvalidArgumentError("timestamps and poses differ in length")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise InvalidArgumentError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @classmethod
    def from_dict(cls, stamped):
        """Build from {timestamp: Pose}."""
        keys = sorted(stamped)
        return cls(np.array(keys), [stamped[k] for k in keys])

    def positions(self):
        """Camera centers (N, 3)."""
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.center for p in self.poses])

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Trajectory(self.timestamps[index], [self.poses[i] for i in index])


@dataclass
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply_points(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def apply_pose(self, pose):
        """Map a world-to-camera pose from the source frame into the target frame."""
        c2w = pose.inverse()
        R = self.rotation @ c2w.rotation_matrix()
        center = self.apply_points(c2w.translation)
        return Pose.from_rt(R, center).inverse()

    def inverse(self):
        R_inv = self.rotation.T
        return Similarity(1.0 / self.scale, R_inv, -(R_inv @ self.translation) / self.scale)


# =============================================================================
# TUM FILES
# =============================================================================
def load_tum(path):
    """Read a TUM trajectory; '#' lines and blank lines are ignored."""
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise ManifestParseError(f"{path}: expected 8 fields, got {len(parts)}", line=lineno)
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise ManifestParseError(f"{path}: non-numeric field", line=lineno) from exc
        t, tx, ty, tz, qx, qy, qz, qw = values
        stamps.append(t)
        poses.append(Pose([qx, qy, qz, qw], [tx, ty, tz]).inverse())
    return Trajectory(np.array(stamps), poses)


def save_tum(trajectory, path, header=None):
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    if header:
        lines.insert(0, f"# {header}")
    for t, pose in zip(trajectory.timestamps, trajectory.poses):
        c2w = pose.inverse()
        values = [*c2w.translation, *c2w.rotation]
        lines.append(f"{t:.6f} " + " ".join(f"{v:.9f}" for v in values))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


# =============================================================================
# ALIGNMENT
# =============================================================================
def associate(est, gt, max_dt=ASSOCIATION_TOLERANCE):
    """
    Nearest-timestamp matching within `max_dt`.

    Returns:
        (est indices, gt indices) of associated pairs
    """
    if len(est) == 0 or len(gt) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pos = np.searchsorted(gt.timestamps, est.timestamps)
    lo = np.clip(pos - 1, 0, len(gt) - 1)
    hi = np.clip(pos, 0, len(gt) - 1)
    pick = np.where(
        np.abs(gt.timestamps[lo] - est.timestamps) <= np.abs(gt.timestamps[hi] - est.timestamps), lo, hi
    )
    ok = np.abs(gt.timestamps[pick] - est.timestamps) <= max_dt
    return np.flatnonzero(ok), pick[ok]


def umeyama(source, target, with_scale=True):
    """
    Closed-form similarity minimizing sum ||s R p + t - q||^2 (det R = +1).

    Args:
        source, target: (N, 3) corresponding points.

    Returns:
        Similarity
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = source.shape[0]
    if n < 3:
        raise AlignmentFailureError(f"need at least 3 correspondences, got {n}")
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    xs, xt = source - mu_s, target - mu_t
    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[1] <= COLLINEAR_RATIO * max(spread[0], 1e-300):
        raise AlignmentFailureError("correspondences are collinear")
    cov = xt.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.sum(xs * xs) / n
    scale = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_t - scale * R @ mu_s
    return Similarity(scale, R, t)


def umeyama_align(est, gt, with_scale=True, max_dt=ASSOCIATION_TOLERANCE):
    """
    Align an estimated trajectory onto ground truth.

    Returns:
        (Similarity est -> gt, aligned estimated Trajectory)
    """
    ie, ig = associate(est, gt, max_dt)
    if ie.size < 3:
        raise AlignmentFailureError(f"only {ie.size} associated poses")
    sim = umeyama(est.positions()[ie], gt.positions()[ig], with_scale)
    aligned = Trajectory(est.timestamps, [sim.apply_pose(p) for p in est.poses])
    return sim, aligned


def ate_rmse(est, gt, max_dt=ASSOCIATION_TOLERANCE):
    """Root-mean-square camera-center error over associated pairs."""
    ie, ig = associate(est, gt, max_dt)
    if ie.size == 0:
        raise MetricsUndefinedError("no associated poses")
    diff = est.positions()[ie] - gt.positions()[ig]
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def trajectory_diameter(traj):
    p = traj.positions()
    if len(p) < 2:
        return 0.0
    d = p[:, None, :] - p[None, :, :]
    return float(np.sqrt(np.max(np.sum(d * d, axis=-1))))
