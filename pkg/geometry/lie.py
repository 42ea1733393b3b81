# =============================================================================
# LIE GROUP - geometry/lie.py
# =============================================================================
# SE(3) poses stored as unit quaternion + translation, with the exponential
# and logarithm maps used by every Gauss-Newton update in the toolkit.
#
# Conventions:
#   - Pose is a world-to-camera transform T: x_cam = R x_world + t.
#   - Quaternions are scalar-last (x, y, z, w), as in TUM trajectory files.
#   - Twists are ordered (v, omega): translation part first.
#   - Updates are left-multiplied: T <- exp(xi) T.
# =============================================================================

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from errors import InvalidArgumentError

SMALL_ANGLE = 1e-5


# =============================================================================
# SO(3) HELPERS
# =============================================================================
def hat(w):
    """Skew-symmetric matrix [w]x so that hat(w) @ p == cross(w, p)."""
    w = np.asarray(w, dtype=np.float64)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def hat_batch(w):
    """Batched hat for an (N, 3) array, returns (N, 3, 3)."""
    w = np.asarray(w)
    out = np.zeros(w.shape[:-1] + (3, 3), dtype=w.dtype)
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _left_jacobian(omega):
    """The V matrix that maps the translational twist to the translation."""
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < SMALL_ANGLE:
        a = 0.5 - theta**2 / 24.0
        b = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta**2
        b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * (W @ W)


def _left_jacobian_inverse(omega):
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta**2 / 720.0
    else:
        c = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * W + c * (W @ W)


# =============================================================================
# POSE
# =============================================================================
@dataclass(frozen=True)
class Pose:
    """
    Rigid transform stored as a unit quaternion and a translation.

    The quaternion is re-normalized on construction, so arbitrarily long
    composition chains keep |q| = 1 to machine precision.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("pose contains non-finite values")
        norm = np.linalg.norm(q)
        if norm == 0.0:
            raise InvalidArgumentError("zero quaternion")
        q = q / norm
        # canonical sign keeps equality checks and logs stable
        if q[3] < 0.0:
            q = -q
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    # --- constructors ---------------------------------------------------------
    @classmethod
    def identity(cls):
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t):
        return cls(Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat(), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls.from_rt(M[:3, :3], M[:3, 3])

    # --- accessors ------------------------------------------------------------
    def rotation_matrix(self):
        return Rotation.from_quat(self.rotation).as_matrix()

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.translation
        return M

    @property
    def center(self):
        """Camera center in world coordinates (for a world-to-camera pose)."""
        return -self.rotation_matrix().T @ self.translation

    # --- group operations -----------------------------------------------------
    def __matmul__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        r1 = Rotation.from_quat(self.rotation)
        rotation = r1 * Rotation.from_quat(other.rotation)
        translation = r1.apply(other.translation) + self.translation
        return Pose(rotation.as_quat(), translation)

    def inverse(self):
        r_inv = Rotation.from_quat(self.rotation).inv()
        return Pose(r_inv.as_quat(), -r_inv.apply(self.translation))

    def apply(self, points):
        """Transform (N, 3) or (3,) points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix().T + self.translation

    def retract(self, twist):
        """Left-multiplicative update exp(twist) * self."""
        return se3_exp(twist) @ self

    def adjoint(self):
        """6x6 adjoint for (v, omega)-ordered twists."""
        R = self.rotation_matrix()
        Ad = np.zeros((6, 6))
        Ad[:3, :3] = R
        Ad[:3, 3:] = hat(self.translation) @ R
        Ad[3:, 3:] = R
        return Ad

    def allclose(self, other, atol=1e-9):
        return bool(
            np.allclose(self.matrix(), other.matrix(), atol=atol)
        )


# =============================================================================
# EXPONENTIAL / LOGARITHM
# =============================================================================
def se3_exp(twist):
    """
    Exponential map from a (v, omega) twist to a Pose.

    Args:
        twist: 6-vector.

    Returns:
        Pose
    """
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(twist)):
        raise InvalidArgumentError("twist must be finite")
    v, omega = twist[:3], twist[3:]
    rotation = Rotation.from_rotvec(omega)
    return Pose(rotation.as_quat(), _left_jacobian(omega) @ v)


def se3_log(pose):
    """
    Logarithm map (principal branch, rotation angle < pi).

    Returns:
        6-vector twist (v, omega).
    """
    if not (np.all(np.isfinite(pose.rotation)) and np.all(np.isfinite(pose.translation))):
        raise InvalidArgumentError("pose must be finite")
    omega = Rotation.from_quat(pose.rotation).as_rotvec()
    v = _left_jacobian_inverse(omega) @ pose.translation
    return np.concatenate([v, omega])


def rotation_matrices(poses):
    """Stack rotation matrices and translations of a pose list: (N,3,3), (N,3)."""
    if not poses:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    quats = np.stack([p.rotation for p in poses])
    R = Rotation.from_quat(quats).as_matrix()
    t = np.stack([p.translation for p in poses])
    return R, t
