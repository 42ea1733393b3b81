# =============================================================================
# IMAGE I/O - pipeline/image_io.py
# =============================================================================
# PNG read/write with Pillow. Color images are float (H, W, 3) in [0, 1];
# depth images are 16-bit PNGs storing z * DEPTH_SCALE (0 = no depth).
# =============================================================================

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from errors import InvalidArgumentError

DEPTH_SCALE = 5000.0  # TUM RGB-D convention


def save_rgb(image, path):
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)


def load_rgb(path):
    """Decode a color image; raises InvalidArgumentError if unreadable."""
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise InvalidArgumentError(f"cannot decode image {path}: {exc}") from exc
    return data / 255.0


def save_depth(depth, path, valid=None):
    depth = np.asarray(depth, dtype=np.float64)
    if valid is not None:
        depth = np.where(valid, depth, 0.0)
    data = np.clip(np.round(depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)


def load_depth(path):
    """
    Returns:
        (z-depth (H, W), valid mask)
    """
    try:
        with Image.open(path) as img:
            raw = np.asarray(img, dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise InvalidArgumentError(f"cannot decode depth {path}: {exc}") from exc
    return raw / DEPTH_SCALE, raw > 0
