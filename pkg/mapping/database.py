# =============================================================================
# KEYFRAME DATABASE - mapping/database.py
# =============================================================================
# Training keyframes of the mapper and ray-bundle sampling over them.
#
# Every keyframe has sampling weight 1 except the newest, which gets
# `recent_boost` for its first `recent_boost_steps` optimization steps.
# Pixels are drawn uniformly inside the chosen image.
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from config import MappingConfig
from errors import ContractViolationError, InvalidArgumentError

logger = logging.getLogger(__name__)


# =============================================================================
# TYPES
# =============================================================================
@dataclass
class KeyframeRecord:
    frame_id: int
    timestamp: float
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray | None  # (H, W) aligned z-depth
    depth_valid: np.ndarray | None  # (H, W) usable depth targets
    normals: np.ndarray | None  # (H, W, 3) camera frame
    pose: object  # world-to-camera Pose, updated in place by the mapper
    twist: np.ndarray  # accumulated pose update applied by the mapper
    rgb_only: bool
    inserted_step: int
    optimized: bool = False

    @property
    def shape(self):
        return self.image.shape[:2]


@dataclass
class RayBundle:
    frame_index: np.ndarray  # (B,) position in the database
    frame_ids: np.ndarray  # (B,)
    us: np.ndarray
    vs: np.ndarray
    color: np.ndarray  # (B, 3)
    depth: np.ndarray  # (B,) z-depth target, 0 where invalid
    depth_valid: np.ndarray  # (B,)
    normal: np.ndarray  # (B, 3) camera frame
    normal_valid: np.ndarray  # (B,)

    def __len__(self):
        return self.us.shape[0]


def _as_float_image(image):
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def record_from_keyframe(keyframe, step):
    """Turn an EnhancedKeyframe into a KeyframeRecord."""
    image = _as_float_image(keyframe.image)
    depth = depth_valid = normals = None
    if not keyframe.rgb_only and keyframe.depth is not None:
        depth = np.asarray(keyframe.depth.values, dtype=np.float64)
        depth_valid = np.asarray(keyframe.depth.mask, dtype=bool).copy()
        if keyframe.depth.clamped is not None:
            depth_valid &= ~np.asarray(keyframe.depth.clamped, dtype=bool)
        if depth.shape != image.shape[:2]:
            raise InvalidArgumentError("depth and image rasters differ in size")
    if not keyframe.rgb_only and keyframe.normals is not None:
        normals = np.asarray(keyframe.normals.values, dtype=np.float64)
        if normals.shape[:2] != image.shape[:2]:
            raise InvalidArgumentError("normal and image rasters differ in size")
    return KeyframeRecord(
        frame_id=keyframe.frame_id,
        timestamp=keyframe.timestamp,
        image=image,
        depth=depth,
        depth_valid=depth_valid,
        normals=normals,
        pose=keyframe.pose,
        twist=np.zeros(6),
        rgb_only=keyframe.rgb_only or depth is None,
        inserted_step=step,
    )


# =============================================================================
# DATABASE
# =============================================================================
class KeyframeDatabase:
    def __init__(self, config=None):
        self.cfg = config or MappingConfig()
        self.records = []
        self._index = {}

    def __len__(self):
        return len(self.records)

    def __contains__(self, frame_id):
        return frame_id in self._index

    def get(self, frame_id):
        return self.records[self._index[frame_id]]

    def position(self, frame_id):
        return self._index[frame_id]

    def poses(self):
        return [r.pose for r in self.records]

    def insert(self, keyframe, step=0):
        """
        Append an enhanced keyframe.

        Returns:
            True if inserted, False for a duplicate id.
        """
        if keyframe.frame_id in self._index:
            logger.warning("keyframe %d already in the database, ignored", keyframe.frame_id)
            return False
        record = record_from_keyframe(keyframe, step)
        self._index[record.frame_id] = len(self.records)
        self.records.append(record)
        self._merge_window_poses(keyframe.window_poses)
        logger.debug("keyframe %d inserted (rgb_only=%s)", record.frame_id, record.rgb_only)
        return True

    def _merge_window_poses(self, window_poses):
        # tracker estimates only replace poses the mapper has not touched yet
        for frame_id, pose in (window_poses or {}).items():
            if frame_id in self._index:
                record = self.get(frame_id)
                if not record.optimized:
                    record.pose = pose

    def sampling_distribution(self, step):
        """Probability of drawing each keyframe at a given optimization step."""
        n = len(self.records)
        if n == 0:
            raise ContractViolationError("database is empty")
        weights = np.ones(n)
        newest = self.records[-1]
        if n > 1 and step - newest.inserted_step < self.cfg.recent_boost_steps:
            weights[-1] = self.cfg.recent_boost
        return weights / weights.sum()

    def sample_bundle(self, rng, batch_size, step=0):
        """
        Draw a ray bundle.

        Args:
            rng: numpy Generator.
            batch_size: Number of rays B.
            step: Current optimization step (for the recent-keyframe boost).

        Returns:
            RayBundle
        """
        probs = self.sampling_distribution(step)
        frame_index = rng.choice(len(self.records), size=batch_size, p=probs)
        us = np.empty(batch_size, dtype=np.int64)
        vs = np.empty(batch_size, dtype=np.int64)
        color = np.empty((batch_size, 3))
        depth = np.zeros(batch_size)
        depth_valid = np.zeros(batch_size, dtype=bool)
        normal = np.zeros((batch_size, 3))
        normal_valid = np.zeros(batch_size, dtype=bool)
        draws_u = rng.random(batch_size)
        draws_v = rng.random(batch_size)
        for k in np.unique(frame_index):
            sel = frame_index == k
            record = self.records[k]
            H, W = record.shape
            u = np.minimum((draws_u[sel] * W).astype(np.int64), W - 1)
            v = np.minimum((draws_v[sel] * H).astype(np.int64), H - 1)
            us[sel], vs[sel] = u, v
            color[sel] = record.image[v, u]
            if record.depth is not None:
                depth[sel] = record.depth[v, u]
                depth_valid[sel] = record.depth_valid[v, u]
            if record.normals is not None:
                n = record.normals[v, u]
                normal[sel] = n
                normal_valid[sel] = np.abs(np.linalg.norm(n, axis=1) - 1.0) < 1e-3
        frame_ids = np.array([r.frame_id for r in self.records], dtype=np.int64)[frame_index]
        return RayBundle(frame_index, frame_ids, us, vs, color, depth, depth_valid, normal, normal_valid)


def insert_keyframe(database, keyframe, step=0):
    """Insert and return the database (unchanged for duplicates)."""
    database.insert(keyframe, step)
    return database


# =============================================================================
# SCENE BOX
# =============================================================================
def estimate_aabb(records, intr, margin=0.1, stride=4):
    """
    Scene box from back-projected keyframe depth plus camera centers.

    Args:
        records: KeyframeRecords.
        intr: Intrinsics.
        margin: Fractional padding on each side.
        stride: Pixel subsampling of the depth rasters.

    Returns:
        (lo, hi)
    """
    points = []
    has_depth = False
    for record in records:
        center = record.pose.center
        points.append(center[None])
        if record.depth is None:
            continue
        u, v = intr.pixel_grid()
        u, v = u[::stride, ::stride], v[::stride, ::stride]
        z = record.depth[::stride, ::stride]
        ok = record.depth_valid[::stride, ::stride] & (z > 0)
        if not np.any(ok):
            continue
        xn, yn = intr.normalized(u[ok], v[ok])
        cam = np.stack([xn * z[ok], yn * z[ok], z[ok]], axis=1)
        points.append(record.pose.inverse().apply(cam))
        has_depth = True
    if not points:
        raise ContractViolationError("no keyframes to bound")
    pts = np.concatenate(points)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    # camera centers alone give no depth range; assume a unit-sized scene
    extent = np.maximum(hi - lo, 1e-3 if has_depth else 1.0)
    pad = margin * extent
    return lo - pad, hi + pad
