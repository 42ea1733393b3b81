# =============================================================================
# KEYFRAME ENHANCEMENT - enhancement/enhancer.py
# =============================================================================
# Attaches scale-consistent dense depth and surface normals to a secured
# keyframe. A prior provider stands in for the monocular prediction network:
#
#   depth, normals = provider(image, frame_id=frame_id)
#
# returning an up-to-scale DepthMap and a camera-frame NormalMap.
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from config import AlignmentConfig
from enhancement.alignment import align_depth
from enhancement.depth import DepthMap, NormalMap
from errors import DegenerateDistributionError, InsufficientDataError

logger = logging.getLogger(__name__)


class PriorProvider(Protocol):
    def __call__(self, image, frame_id=None):
        """Return (DepthMap up to scale, NormalMap) for an RGB image."""
        ...


@dataclass(frozen=True)
class EnhancedKeyframe:
    frame_id: int
    timestamp: float
    image: np.ndarray
    pose: object
    depth: DepthMap | None
    normals: NormalMap | None
    alpha: float = 1.0
    beta: float = 0.0
    rgb_only: bool = False
    window_poses: dict | None = None

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


def rgb_only_keyframe(keyframe, reason):
    logger.warning("keyframe %d forwarded rgb-only: %s", keyframe.frame_id, reason)
    return EnhancedKeyframe(
        frame_id=keyframe.frame_id,
        timestamp=keyframe.timestamp,
        image=keyframe.image,
        pose=keyframe.pose,
        depth=None,
        normals=None,
        rgb_only=True,
        window_poses=keyframe.window_poses,
    )


def enhance_keyframe(keyframe, provider, strategy=None, config=None):
    """
    Run the prior provider once and align its depth to the keyframe's
    sparse patch depths.

    Args:
        keyframe: SecuredKeyframe (image, pose, sparse depths).
        provider: PriorProvider.
        strategy: Alignment strategy; defaults to config.strategy.
        config: AlignmentConfig.

    Returns:
        EnhancedKeyframe. Provider or alignment failures produce an
        rgb-only keyframe instead of raising.
    """
    config = config or AlignmentConfig()
    strategy = strategy or config.strategy
    try:
        depth, normals = provider(keyframe.image, frame_id=keyframe.frame_id)
    except Exception as exc:
        return rgb_only_keyframe(keyframe, f"prior provider failed ({type(exc).__name__}: {exc})")

    if depth.shape != keyframe.image.shape[:2] or normals.shape != keyframe.image.shape[:2]:
        return rgb_only_keyframe(keyframe, "prior rasters do not match the image size")

    try:
        result = align_depth(
            depth,
            keyframe.sparse,
            strategy,
            outlier_mad=config.outlier_mad,
            depth_floor=config.depth_floor,
        )
    except (InsufficientDataError, DegenerateDistributionError) as exc:
        return rgb_only_keyframe(keyframe, f"alignment failed ({exc})")

    logger.debug(
        "keyframe %d aligned with %s: alpha=%.4f beta=%.4f",
        keyframe.frame_id, result.strategy, result.alpha, result.beta,
    )
    return EnhancedKeyframe(
        frame_id=keyframe.frame_id,
        timestamp=keyframe.timestamp,
        image=keyframe.image,
        pose=keyframe.pose,
        depth=result.depth,
        normals=normals,
        alpha=result.alpha,
        beta=result.beta,
        window_poses=keyframe.window_poses,
    )
