# =============================================================================
# PINHOLE CAMERA - geometry/camera.py
# =============================================================================
# Intrinsics plus projection / unprojection.
#
# Unprojection convention: a pixel (u, v) with inverse depth d maps to the
# homogeneous point [x_n, y_n, 1, d] with x_n = (u - cx) / fx and
# y_n = (v - cy) / fy, i.e. the Euclidean point (x_n, y_n, 1) / d.
# Rigid transforms act on the first three coordinates scaled by d, so the
# homogeneous form never divides by d and stays finite as d -> 0.
# =============================================================================

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from errors import BehindCameraError, InvalidArgumentError


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")

    @classmethod
    def from_config(cls, camera):
        return cls(camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height)

    def matrix(self):
        """The 3x3 calibration matrix."""
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def matrix4(self):
        """The 4x4 calibration matrix acting on [u, v, 1, d]."""
        K = np.eye(4)
        K[:3, :3] = self.matrix()
        return K

    def scaled(self, factor):
        """Intrinsics for an image resized by `factor`."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            max(1, int(round(self.width * factor))),
            max(1, int(round(self.height * factor))),
        )

    def contains(self, u, v, margin=0.0):
        u = np.asarray(u)
        v = np.asarray(v)
        return (
            (u >= margin) & (u <= self.width - 1 - margin)
            & (v >= margin) & (v <= self.height - 1 - margin)
        )

    def normalized(self, u, v):
        """Normalized image coordinates (x_n, y_n)."""
        return (np.asarray(u, dtype=np.float64) - self.cx) / self.fx, \
            (np.asarray(v, dtype=np.float64) - self.cy) / self.fy

    def pixel_grid(self):
        """(H, W) arrays of pixel u and v coordinates."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return u.astype(np.float64), v.astype(np.float64)


# =============================================================================
# PROJECTION
# =============================================================================
def project(point_cam, intr):
    """
    Project camera-frame points to pixels.

    Args:
        point_cam: (3,) or (N, 3) points with z > 0.
        intr: Intrinsics.

    Returns:
        (2,) or (N, 2) pixel coordinates, possibly outside the image.
    """
    p = np.asarray(point_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera")
    u = intr.fx * p[..., 0] / z + intr.cx
    v = intr.fy * p[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def unproject(pixel, inv_depth, intr):
    """
    Lift pixels with inverse depth to camera-frame points.

    Args:
        pixel: (2,) or (N, 2) pixel coordinates.
        inv_depth: scalar or (N,) inverse depths, > 0.
        intr: Intrinsics.

    Returns:
        (3,) or (N, 3) points.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(inv_depth, dtype=np.float64)
    if np.any(d <= 0):
        raise InvalidArgumentError("inverse depth must be positive")
    x, y = intr.normalized(pixel[..., 0], pixel[..., 1])
    ray = np.stack([x, y, np.ones_like(x)], axis=-1)
    return ray / d[..., None] if d.ndim else ray / d
