# =============================================================================
# KEYFRAME DUMP - pipeline/keyframes.py
# =============================================================================
# Enhanced keyframes written as one compressed .npz per keyframe so mapping
# can be re-run offline (`densevo map`).
# =============================================================================

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from enhancement.depth import DepthMap, NormalMap
from enhancement.enhancer import EnhancedKeyframe
from errors import InvalidArgumentError
from geometry.lie import Pose

logger = logging.getLogger(__name__)

DUMP_DIR = "keyframes"


def save_keyframe(keyframe, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        "frame_id": np.int64(keyframe.frame_id),
        "timestamp": np.float64(keyframe.timestamp),
        "image": np.asarray(keyframe.image),
        "rotation": keyframe.pose.rotation,
        "translation": keyframe.pose.translation,
        "alpha": np.float64(keyframe.alpha),
        "beta": np.float64(keyframe.beta),
        "rgb_only": np.bool_(keyframe.rgb_only),
    }
    if keyframe.depth is not None:
        arrays["depth"] = keyframe.depth.values
        arrays["depth_mask"] = keyframe.depth.mask
        arrays["depth_clamped"] = keyframe.depth.clamped
    if keyframe.normals is not None:
        arrays["normals"] = keyframe.normals.values
    path = directory / f"{keyframe.frame_id:06d}.npz"
    np.savez_compressed(path, **arrays)
    return path


def load_keyframe(path):
    with np.load(path) as data:
        depth = normals = None
        if "depth" in data:
            depth = DepthMap(data["depth"], data["depth_mask"], data["depth_clamped"])
        if "normals" in data:
            normals = NormalMap(data["normals"])
        return EnhancedKeyframe(
            frame_id=int(data["frame_id"]),
            timestamp=float(data["timestamp"]),
            image=data["image"],
            pose=Pose(data["rotation"], data["translation"]),
            depth=depth,
            normals=normals,
            alpha=float(data["alpha"]),
            beta=float(data["beta"]),
            rgb_only=bool(data["rgb_only"]),
        )


def load_keyframe_dump(directory):
    """All dumped keyframes ordered by frame id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidArgumentError(f"keyframe dump not found: {directory}")
    keyframes = [load_keyframe(p) for p in sorted(directory.glob("*.npz"))]
    logger.info("loaded %d keyframes from %s", len(keyframes), directory)
    return sorted(keyframes, key=lambda kf: kf.frame_id)
