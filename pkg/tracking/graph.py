# =============================================================================
# PATCH GRAPH - tracking/graph.py
# =============================================================================
# Bipartite patch-frame graph of the sliding window.
#
# Storage is array based: patches live in flat arrays indexed by patch id,
# edges in parallel arrays (patch, target frame, target pixel, weight).
# Frames are kept in time order; a frame's position in that order is what
# the temporal edge radius is measured in.
# =============================================================================

from __future__ import annotations

import copy
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from errors import InvalidArgumentError
from geometry.lie import rotation_matrices
from geometry.patch import Patch, reproject_points, relative_transform

logger = logging.getLogger(__name__)


@dataclass
class FrameEntry:
    frame_id: int
    timestamp: float
    pose: object
    image: np.ndarray


class PatchGraph:
    """
    Keyframes, patches and correspondence edges of the tracking window.

    Attributes:
        frames: FrameEntry list in time order.
        patch_frame / patch_us / patch_vs / inv_depth: per-patch arrays.
        edge_patch / edge_target: (E,) patch index and target frame id.
        edge_delta / edge_weight: (E, 2) correction and confidence.
        edge_goal: (E, 2) target pixel r + delta captured when the
            correspondence provider ran.
        archive: read-only patches of frames that left the window.
    """

    def __init__(self, patch_size, archive_frames=10):
        self.patch_size = patch_size
        self.frames = []
        n = patch_size * patch_size
        self.patch_frame = np.zeros(0, dtype=np.int64)
        self.patch_us = np.zeros((0, n))
        self.patch_vs = np.zeros((0, n))
        self.inv_depth = np.zeros(0)
        self.edge_patch = np.zeros(0, dtype=np.int64)
        self.edge_target = np.zeros(0, dtype=np.int64)
        self.edge_delta = np.zeros((0, 2))
        self.edge_weight = np.zeros((0, 2))
        self.edge_goal = np.zeros((0, 2))
        self.archive = deque(maxlen=archive_frames)

    # --- frames ---------------------------------------------------------------
    @property
    def frame_ids(self):
        return [f.frame_id for f in self.frames]

    def __len__(self):
        return len(self.frames)

    def position(self, frame_id):
        for k, f in enumerate(self.frames):
            if f.frame_id == frame_id:
                return k
        raise KeyError(frame_id)

    def frame(self, frame_id):
        return self.frames[self.position(frame_id)]

    def pose(self, frame_id):
        return self.frame(frame_id).pose

    def set_pose(self, frame_id, pose):
        self.frame(frame_id).pose = pose

    def add_frame(self, frame_id, timestamp, pose, image):
        if self.frames and frame_id <= self.frames[-1].frame_id:
            raise InvalidArgumentError("frames must be added in time order")
        self.frames.append(FrameEntry(frame_id, timestamp, pose, image))

    def images(self):
        return {f.frame_id: f.image for f in self.frames}

    # --- patches --------------------------------------------------------------
    @property
    def num_patches(self):
        return self.inv_depth.size

    @property
    def num_edges(self):
        return self.edge_patch.size

    @property
    def patches(self):
        return [self.patch(k) for k in range(self.num_patches)]

    def patch(self, k):
        return Patch(
            int(self.patch_frame[k]), self.patch_us[k], self.patch_vs[k], float(self.inv_depth[k])
        )

    def patch_centers(self, k=None):
        mid = self.patch_size * self.patch_size // 2
        if k is None:
            return np.stack([self.patch_us[:, mid], self.patch_vs[:, mid]], axis=-1)
        return np.stack([self.patch_us[k, mid], self.patch_vs[k, mid]], axis=-1)

    def patches_of(self, frame_id):
        return np.flatnonzero(self.patch_frame == frame_id)

    def add_patches(self, patches):
        if not patches:
            return
        self.patch_frame = np.concatenate([self.patch_frame, [p.frame_id for p in patches]])
        self.patch_us = np.concatenate([self.patch_us, np.stack([p.pixel_us for p in patches])])
        self.patch_vs = np.concatenate([self.patch_vs, np.stack([p.pixel_vs for p in patches])])
        self.inv_depth = np.concatenate([self.inv_depth, [p.inv_depth for p in patches]])

    # --- edges ----------------------------------------------------------------
    def edge_source(self):
        return self.patch_frame[self.edge_patch]

    def edge_set(self):
        """Edges as a set of (patch, source frame, target frame) tuples."""
        src = self.edge_source()
        return {
            (int(k), int(i), int(j))
            for k, i, j in zip(self.edge_patch, src, self.edge_target)
        }

    def add_edges(self, patch_idx, targets):
        m = len(patch_idx)
        if m == 0:
            return
        self.edge_patch = np.concatenate([self.edge_patch, np.asarray(patch_idx, dtype=np.int64)])
        self.edge_target = np.concatenate([self.edge_target, np.asarray(targets, dtype=np.int64)])
        self.edge_delta = np.concatenate([self.edge_delta, np.zeros((m, 2))])
        self.edge_weight = np.concatenate([self.edge_weight, np.zeros((m, 2))])
        self.edge_goal = np.concatenate([self.edge_goal, np.full((m, 2), np.nan)])

    def keep_edges(self, mask):
        self.edge_patch = self.edge_patch[mask]
        self.edge_target = self.edge_target[mask]
        self.edge_delta = self.edge_delta[mask]
        self.edge_weight = self.edge_weight[mask]
        self.edge_goal = self.edge_goal[mask]

    def set_corrections(self, delta, weight, anchors=None):
        """Store provider output; goal pixels are anchored at the current reprojection."""
        delta = np.asarray(delta, dtype=np.float64).reshape(-1, 2)
        weight = np.asarray(weight, dtype=np.float64).reshape(-1, 2)
        if delta.shape[0] != self.num_edges or weight.shape[0] != self.num_edges:
            raise InvalidArgumentError("provider output does not match the edge count")
        if anchors is None:
            raise InvalidArgumentError("anchor reprojections are required")
        self.edge_delta = delta
        self.edge_weight = weight
        self.edge_goal = anchors + delta

    # --- geometry -------------------------------------------------------------
    def pose_arrays(self, frame_ids):
        poses = [self.pose(f) for f in frame_ids]
        return rotation_matrices(poses)

    def reproject_edges(self, intr):
        """Current reprojection of each edge's patch center: (E, 2) and validity."""
        if self.num_edges == 0:
            return np.zeros((0, 2)), np.zeros(0, dtype=bool)
        ids = self.frame_ids
        R, t = self.pose_arrays(ids)
        lookup = {f: k for k, f in enumerate(ids)}
        src = np.array([lookup[f] for f in self.edge_source()])
        dst = np.array([lookup[f] for f in self.edge_target])
        R_ij, t_ij = relative_transform(R[src], t[src], R[dst], t[dst])
        centers = self.patch_centers()[self.edge_patch]
        return reproject_points(
            centers[:, 0], centers[:, 1], self.inv_depth[self.edge_patch], R_ij, t_ij, intr
        )

    # --- window maintenance ---------------------------------------------------
    def remove_frame(self, frame_id, archive=False):
        """
        Drop a frame, its patches and every edge touching them.

        With archive=True the frame's patches are kept read-only in
        `self.archive` (used for frames that slide out of the window).
        """
        pos = self.position(frame_id)
        entry = self.frames.pop(pos)
        doomed = self.patch_frame == frame_id
        if archive and np.any(doomed):
            self.archive.append({
                "frame_id": frame_id,
                "pose": entry.pose,
                "centers": self.patch_centers()[doomed].copy(),
                "inv_depth": self.inv_depth[doomed].copy(),
            })

        edge_mask = ~doomed[self.edge_patch] & (self.edge_target != frame_id)
        self.keep_edges(edge_mask)

        remap = np.cumsum(~doomed) - 1
        self.edge_patch = remap[self.edge_patch]
        self.patch_frame = self.patch_frame[~doomed]
        self.patch_us = self.patch_us[~doomed]
        self.patch_vs = self.patch_vs[~doomed]
        self.inv_depth = self.inv_depth[~doomed]
        return entry

    def snapshot(self):
        """Deep copy used to roll back a frame on provider failure."""
        return copy.deepcopy(self)


# =============================================================================
# EDGE CONSTRUCTION
# =============================================================================
def build_edges(graph, neighborhood_radius=0):
    """
    Connect every patch to the window frames within the temporal radius.

    Args:
        graph: PatchGraph with frames in time order.
        neighborhood_radius: Radius in window positions; 0 means the whole window.

    Returns:
        The graph's full edge set of (patch, source frame, target frame).
    """
    ids = graph.frame_ids
    if len(ids) < 2 or graph.num_patches == 0:
        return graph.edge_set()
    radius = len(ids) if neighborhood_radius <= 0 else neighborhood_radius
    pos = {f: k for k, f in enumerate(ids)}

    existing = graph.edge_set()
    new_patch, new_target = [], []
    for k in range(graph.num_patches):
        i = int(graph.patch_frame[k])
        if i not in pos:
            continue
        pi = pos[i]
        lo, hi = max(0, pi - radius), min(len(ids) - 1, pi + radius)
        for pj in range(lo, hi + 1):
            j = ids[pj]
            if j == i or (k, i, j) in existing:
                continue
            new_patch.append(k)
            new_target.append(j)
    graph.add_edges(new_patch, new_target)
    if new_patch:
        logger.debug("added %d edges (%d total)", len(new_patch), graph.num_edges)
    return graph.edge_set()
