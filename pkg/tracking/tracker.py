# =============================================================================
# TRACKER - tracking/tracker.py
# =============================================================================
# Sliding-window patch tracker. Each call to track_frame:
#   1. predicts the new pose (constant velocity) and samples K patches
#   2. connects patches and frames, asks the provider for corrections
#   3. runs bundle adjustment over the window
#   4. applies the keyframe policy to the fourth most recent frame and
#      emits it downstream once it is secured
#
# Usage:
#   tracker = Tracker(intr, provider, cfg.tracker, seed=cfg.run.seed)
#   out = tracker.track_frame(image, timestamp)
#   for kf in out.secured: ...
# =============================================================================

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import TrackerConfig
from enhancement.depth import SparseDepthSet
from errors import InvalidArgumentError, ProviderError
from geometry.lie import Pose
from tracking.bundle_adjustment import ba_step
from tracking.graph import PatchGraph, build_edges
from tracking.keyframing import (
    KeyframeDecision,
    SlidingWindow,
    candidate_flow,
    keyframe_decision,
)
from tracking.providers import check_provider_output
from tracking.sampling import sample_patches

logger = logging.getLogger(__name__)


# =============================================================================
# MESSAGES
# =============================================================================
@dataclass(frozen=True)
class SecuredKeyframe:
    """Immutable snapshot handed to the enhancement stage."""

    frame_id: int
    timestamp: float
    image: np.ndarray
    pose: Pose
    sparse: SparseDepthSet
    window_poses: dict


@dataclass
class TrackingOutput:
    frame_id: int
    timestamp: float
    pose: Pose | None
    secured: list = field(default_factory=list)
    dropped: bool = False
    ba: object = None


def _frozen_copy(array):
    out = np.array(array, copy=True)
    out.setflags(write=False)
    return out


# =============================================================================
# TRACKER
# =============================================================================
class Tracker:
    def __init__(self, intr, provider, config=None, seed=0):
        self.intr = intr
        self.provider = provider
        self.cfg = config or TrackerConfig()
        self.seed = seed
        self.graph = PatchGraph(self.cfg.patch_size, archive_frames=self.cfg.window_size)
        self.window = SlidingWindow(self.cfg.window_size, self.cfg.flow_threshold)
        self.counter = 0
        self.last_ba = None
        self._poses = {}
        self._deltas = {}
        self._timestamps = {}
        self._dropped = []
        self._dump_path = Path(self.cfg.debug_dump) if self.cfg.debug_dump else None

    # --- public API -----------------------------------------------------------
    def track_frame(self, image, timestamp):
        """
        Add one frame to the window.

        Args:
            image: (H, W) or (H, W, 3) raster.
            timestamp: Strictly increasing time in seconds.

        Returns:
            TrackingOutput (secured keyframes, if any, in `secured`)
        """
        image = np.asarray(image)
        if self._timestamps and timestamp <= max(self._timestamps.values()):
            raise InvalidArgumentError("timestamps must be strictly increasing")
        frame_id = self.counter
        self.counter += 1

        snapshot = self.graph.snapshot()
        window_ids = list(self.window.frame_ids)
        try:
            self._add_frame(frame_id, timestamp, image)
        except ProviderError as exc:
            self.graph = snapshot
            self.window.frame_ids = window_ids
            self._dropped.append(frame_id)
            logger.warning("frame %d dropped: %s", frame_id, exc)
            return TrackingOutput(frame_id, timestamp, None, dropped=True)

        self._timestamps[frame_id] = timestamp
        result = None
        if len(self.graph) >= 2 and self.graph.num_edges:
            result = ba_step(
                self.graph,
                self.intr,
                iterations=self.cfg.ba_iterations,
                damping=self.cfg.damping,
                frozen_frames=self.cfg.frozen_frames,
                damping_cap=self.cfg.damping_cap,
                depth_floor=self.cfg.inverse_depth_floor,
                huber_delta=self.cfg.huber_delta,
            )
            self.last_ba = result
        self._sync_poses()
        pose = self.graph.pose(frame_id)
        self._write_dump(frame_id, timestamp, result)

        secured = self._apply_policy()
        self._slide()
        return TrackingOutput(frame_id, timestamp, pose, secured=secured, ba=result)

    def flush(self):
        """Secure the still-pending frames at the end of the stream."""
        out = []
        for f in list(self.window.frame_ids):
            if f not in self.window.secured:
                self.window.secured.add(f)
                out.append(self._secure(f))
        self._sync_poses()
        return out

    def get_pose(self, frame_id):
        if frame_id in self._poses:
            return self._poses[frame_id]
        ref, rel = self._deltas[frame_id]
        return rel @ self.get_pose(ref)

    def trajectory(self):
        """(timestamp, world-to-camera Pose) for every tracked frame."""
        return [(self._timestamps[f], self.get_pose(f)) for f in sorted(self._timestamps)]

    @property
    def dropped(self):
        return list(self._dropped)

    # --- internals ------------------------------------------------------------
    def _predict_pose(self):
        ids = self.graph.frame_ids
        if not ids:
            return Pose.identity()
        last = self.graph.pose(ids[-1])
        if len(ids) < 2:
            return last
        prev = self.graph.pose(ids[-2])
        return (last @ prev.inverse()) @ last

    def _initial_inv_depth(self):
        if self.graph.num_patches == 0:
            return 1.0
        return float(np.median(self.graph.inv_depth))

    def _add_frame(self, frame_id, timestamp, image):
        graph = self.graph
        pose = self._predict_pose()
        inv_depth = self._initial_inv_depth()
        graph.add_frame(frame_id, timestamp, pose, image)
        self.window.frame_ids.append(frame_id)
        patches = sample_patches(
            image,
            self.cfg.patches_per_frame,
            self.cfg.patch_size,
            rng_seed=(self.seed, frame_id),
            inv_depth=inv_depth,
            frame_id=frame_id,
        )
        graph.add_patches(patches)
        build_edges(graph, self.cfg.edge_radius)
        if graph.num_edges == 0:
            return

        anchors, valid = graph.reproject_edges(self.intr)
        try:
            delta, psi = self.provider(graph, graph.images())
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(f"{type(exc).__name__}: {exc}") from exc
        delta, psi = check_provider_output(graph, delta, psi)
        psi = np.where(valid[:, None], psi, 0.0)
        graph.set_corrections(delta, psi, np.where(valid[:, None], anchors, np.nan))

    def _sync_poses(self):
        for entry in self.graph.frames:
            self._poses[entry.frame_id] = entry.pose

    def _apply_policy(self):
        window = self.window
        candidate = window.candidate
        if candidate is None or candidate in window.secured:
            return []
        predecessor = window.predecessor
        if predecessor is None:
            decision = KeyframeDecision.KEEP
        else:
            flow = candidate_flow(self.graph, self.intr, candidate, predecessor)
            decision, _ = keyframe_decision(window, flow)
            logger.debug("frame %d flow %.2f px -> %s", candidate, flow, decision.value)

        if decision is KeyframeDecision.REMOVE:
            rel = self.graph.pose(candidate) @ self.graph.pose(predecessor).inverse()
            self._deltas[candidate] = (predecessor, rel)
            self._poses.pop(candidate, None)
            self.graph.remove_frame(candidate)
            window.frame_ids.remove(candidate)
            return []

        window.secured.add(candidate)
        return [self._secure(candidate)]

    def _slide(self):
        for frame_id in self.window.overflow():
            self.graph.remove_frame(frame_id, archive=True)
            self.window.frame_ids.remove(frame_id)
            self.window.secured.discard(frame_id)

    def _secure(self, frame_id):
        entry = self.graph.frame(frame_id)
        idx = self.graph.patches_of(frame_id)
        centers = self.graph.patch_centers()[idx]
        depths = 1.0 / self.graph.inv_depth[idx]
        return SecuredKeyframe(
            frame_id=frame_id,
            timestamp=entry.timestamp,
            image=_frozen_copy(entry.image),
            pose=entry.pose,
            sparse=SparseDepthSet(_frozen_copy(centers), _frozen_copy(depths)),
            window_poses={f.frame_id: f.pose for f in self.graph.frames},
        )

    def _write_dump(self, frame_id, timestamp, result):
        if self._dump_path is None:
            return
        graph = self.graph
        reproj, _ = graph.reproject_edges(self.intr)
        residual = reproj - graph.edge_goal
        edges = [
            [int(k), int(i), int(j), *map(_finite_or_none, res), *map(float, w)]
            for k, i, j, res, w in zip(
                graph.edge_patch, graph.edge_source(), graph.edge_target, residual, graph.edge_weight
            )
        ]
        record = {
            "frame": frame_id,
            "timestamp": timestamp,
            "window": graph.frame_ids,
            "cost": None if result is None else _finite_or_none(result.cost),
            "initial_cost": None if result is None else _finite_or_none(result.initial_cost),
            "status": None if result is None else result.status,
            "edges": edges,
        }
        self._dump_path.parent.mkdir(parents=True, exist_ok=True)
        with self._dump_path.open("a") as fh:
            fh.write(json.dumps(record, allow_nan=False) + "\n")


def _finite_or_none(x):
    # invalid reprojections go out as JSON null
    x = float(x)
    return x if np.isfinite(x) else None


def track_frame(tracker, image, timestamp):
    """Functional entry point; see Tracker.track_frame."""
    return tracker.track_frame(image, timestamp)
