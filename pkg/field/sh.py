# =============================================================================
# SPHERICAL HARMONICS - field/sh.py
# =============================================================================
# Real spherical harmonics of the view direction (up to 4 bands, 16
# coefficients) and their derivatives with respect to the direction, used
# when pose gradients flow through the ray direction.
# =============================================================================

import logging

import numpy as np

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

MAX_BANDS = 4
UNIT_TOLERANCE = 1e-3

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2_XY = 1.0925484305920792
C2_ZZ = 0.9461746957575601
C2_0 = 0.31539156525251999
C2_XX = 0.5462742152960396
C3_A = 0.5900435899266435
C3_B = 2.890611442640554
C3_C = 0.4570457994644658
C3_D = 0.3731763325901154
C3_E = 1.445305721320277


def _check_directions(directions):
    d = np.asarray(directions)
    if d.ndim == 1:
        d = d[None]
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidArgumentError("view direction must be non-zero")
    if np.any(np.abs(norm - 1.0) > UNIT_TOLERANCE):
        logger.warning("non-unit view direction (|d| up to %.4f), normalizing", float(norm.max()))
    return d / norm


def sh_encode(directions, degree=MAX_BANDS):
    """
    Real SH basis values.

    Args:
        directions: (N, 3) or (3,) unit directions.
        degree: Number of bands, 1..4 (degree**2 coefficients).

    Returns:
        (N, degree**2) array
    """
    if not 1 <= degree <= MAX_BANDS:
        raise InvalidArgumentError(f"SH degree must be 1..{MAX_BANDS}, got {degree}")
    d = _check_directions(directions)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.zeros((d.shape[0], degree * degree), dtype=d.dtype)
    out[:, 0] = C0
    if degree > 1:
        out[:, 1] = C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = C1 * x
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = C2_XY * x * y
        out[:, 5] = C2_XY * y * z
        out[:, 6] = C2_ZZ * zz - C2_0
        out[:, 7] = C2_XY * x * z
        out[:, 8] = C2_XX * (xx - yy)
    if degree > 3:
        out[:, 9] = C3_A * y * (3 * xx - yy)
        out[:, 10] = C3_B * x * y * z
        out[:, 11] = C3_C * y * (5 * zz - 1)
        out[:, 12] = C3_D * z * (5 * zz - 3)
        out[:, 13] = C3_C * x * (5 * zz - 1)
        out[:, 14] = C3_E * z * (xx - yy)
        out[:, 15] = C3_A * x * (xx - 3 * yy)
    return out


def sh_jacobian(directions, degree=MAX_BANDS):
    """d sh_encode / d direction, shape (N, degree**2, 3), for unit directions."""
    d = np.asarray(directions)
    if d.ndim == 1:
        d = d[None]
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    J = np.zeros((d.shape[0], degree * degree, 3), dtype=d.dtype)
    if degree > 1:
        J[:, 1, 1] = C1
        J[:, 2, 2] = C1
        J[:, 3, 0] = C1
    if degree > 2:
        J[:, 4, 0], J[:, 4, 1] = C2_XY * y, C2_XY * x
        J[:, 5, 1], J[:, 5, 2] = C2_XY * z, C2_XY * y
        J[:, 6, 2] = 2 * C2_ZZ * z
        J[:, 7, 0], J[:, 7, 2] = C2_XY * z, C2_XY * x
        J[:, 8, 0], J[:, 8, 1] = 2 * C2_XX * x, -2 * C2_XX * y
    if degree > 3:
        xx, yy, zz = x * x, y * y, z * z
        J[:, 9, 0], J[:, 9, 1] = 6 * C3_A * x * y, 3 * C3_A * (xx - yy)
        J[:, 10, 0], J[:, 10, 1], J[:, 10, 2] = C3_B * y * z, C3_B * x * z, C3_B * x * y
        J[:, 11, 1], J[:, 11, 2] = C3_C * (5 * zz - 1), 10 * C3_C * y * z
        J[:, 12, 2] = C3_D * (15 * zz - 3)
        J[:, 13, 0], J[:, 13, 2] = C3_C * (5 * zz - 1), 10 * C3_C * x * z
        J[:, 14, 0], J[:, 14, 1], J[:, 14, 2] = 2 * C3_E * x * z, -2 * C3_E * y * z, C3_E * (xx - yy)
        J[:, 15, 0], J[:, 15, 1] = 3 * C3_A * (xx - yy), -6 * C3_A * x * y
    return J
