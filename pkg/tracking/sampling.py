# =============================================================================
# PATCH SAMPLING - tracking/sampling.py
# =============================================================================

import numpy as np

from errors import InvalidArgumentError
from geometry.patch import Patch


def sample_patches(image, count, size, rng_seed, inv_depth=1.0, frame_id=0):
    """
    Draw `count` square patches with uniformly random integer centers.

    Centers lie in [r, W-1-r] x [r, H-1-r] with r = size // 2, so every
    patch pixel is inside the image.

    Args:
        image: (H, W) or (H, W, C) raster.
        count: Number of patches K >= 1.
        size: Odd patch side s.
        rng_seed: Seed for numpy's default_rng.
        inv_depth: Initial inverse depth shared by all patches.
        frame_id: Frame the patches belong to.

    Returns:
        list of Patch
    """
    if count < 1:
        raise InvalidArgumentError("patch count must be at least 1")
    if size < 1 or size % 2 == 0:
        raise InvalidArgumentError("patch size must be a positive odd number")
    height, width = np.asarray(image).shape[:2]
    if height < size or width < size:
        raise InvalidArgumentError(
            f"image {width}x{height} is smaller than a {size}x{size} patch"
        )

    r = size // 2
    rng = np.random.default_rng(rng_seed)
    us = rng.integers(r, width - r, size=count)
    vs = rng.integers(r, height - r, size=count)
    return [
        Patch.centered(frame_id, float(u), float(v), size, inv_depth)
        for u, v in zip(us, vs)
    ]
