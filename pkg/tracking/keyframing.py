# =============================================================================
# KEYFRAMING - tracking/keyframing.py
# =============================================================================
# The three most recent frames are always keyframes. The fourth most recent
# one stays only if its optical flow to its predecessor is high enough;
# otherwise it is removed and remembered as a pose relative to that
# predecessor.
# =============================================================================

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from errors import InvalidArgumentError
from geometry.lie import rotation_matrices
from geometry.patch import relative_transform, reproject_points

CANDIDATE_INDEX = 4  # fourth most recent frame


class KeyframeDecision(enum.Enum):
    KEEP = "keep"
    REMOVE = "remove-fourth-recent"


@dataclass
class SlidingWindow:
    """
    Policy state of the keyframe window.

    Attributes:
        max_keyframes: Frames kept in the optimization window.
        flow_threshold: Mean patch-center flow (px) that keeps a candidate.
        frame_ids: Frame ids currently in the window, oldest first.
        secured: Ids that have been decided as keyframes (emitted once).
    """

    max_keyframes: int = 10
    flow_threshold: float = 16.0
    frame_ids: list = field(default_factory=list)
    secured: set = field(default_factory=set)

    def __post_init__(self):
        if self.max_keyframes < CANDIDATE_INDEX:
            raise InvalidArgumentError("window must hold at least 4 keyframes")

    def __len__(self):
        return len(self.frame_ids)

    @property
    def candidate(self):
        """The fourth most recent frame, or None while the window is short."""
        if len(self.frame_ids) < CANDIDATE_INDEX:
            return None
        return self.frame_ids[-CANDIDATE_INDEX]

    @property
    def predecessor(self):
        if len(self.frame_ids) <= CANDIDATE_INDEX:
            return None
        return self.frame_ids[-CANDIDATE_INDEX - 1]

    @property
    def pending(self):
        """Frames not yet decided (the three most recent at steady state)."""
        return [f for f in self.frame_ids if f not in self.secured]

    def overflow(self):
        """Oldest frames that must leave the window to respect max_keyframes."""
        extra = len(self.frame_ids) - self.max_keyframes
        return list(self.frame_ids[:extra]) if extra > 0 else []


def keyframe_decision(window, flow_to_predecessor):
    """
    Decide the fate of the fourth most recent frame.

    Args:
        window: SlidingWindow with at least four frames.
        flow_to_predecessor: Mean flow (px) between candidate and predecessor.

    Returns:
        (KeyframeDecision, frame id of the fourth most recent frame)
    """
    if len(window) < CANDIDATE_INDEX:
        raise InvalidArgumentError("keyframe decision needs at least 4 frames")
    candidate = window.candidate
    if flow_to_predecessor < window.flow_threshold:
        return KeyframeDecision.REMOVE, candidate
    return KeyframeDecision.KEEP, candidate


def motion_magnitude(graph, intr, i, j):
    """
    Mean displacement of frame i's patch centers when reprojected into frame j.

    Returns 0 when frame i has no patches with a valid reprojection.
    """
    idx = graph.patches_of(i)
    if idx.size == 0:
        return 0.0
    R, t = rotation_matrices([graph.pose(i), graph.pose(j)])
    R_ij, t_ij = relative_transform(R[0], t[0], R[1], t[1])
    centers = graph.patch_centers()[idx]
    pix, valid = reproject_points(
        centers[:, 0], centers[:, 1], graph.inv_depth[idx], R_ij, t_ij, intr
    )
    if not np.any(valid):
        return 0.0
    return float(np.mean(np.linalg.norm(pix[valid] - centers[valid], axis=1)))


def candidate_flow(graph, intr, candidate, predecessor):
    """Symmetric mean flow between the candidate and its predecessor."""
    return 0.5 * (
        motion_magnitude(graph, intr, candidate, predecessor)
        + motion_magnitude(graph, intr, predecessor, candidate)
    )
