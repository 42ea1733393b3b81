# =============================================================================
# TRAINING LOSSES - mapping/losses.py
# =============================================================================
# Every loss returns (value, cotangents) with the cotangents on the render
# outputs it reads. All losses are means over the rays they apply to, so the
# total-loss weights do not depend on the batch size.
#
#   rgb     mean ||C - C_hat||^2
#   depth   mean -sum_t log(w_t + eps) * G_t * delta_t,
#           G_t = exp(-(t - D)^2 / (2 sigma^2))
#   normal  mean sum |N - N_hat| + |1 - N . N_hat|
#   reg     prop + dist_weight * dist
#   total   rgb + 0.001 depth + 1e-5 normal + reg
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from config import LossConfig
from errors import InvalidArgumentError, NumericalFailureError

logger = logging.getLogger(__name__)

LOG_EPS = 1e-6
PROP_EPS = 1e-7


@dataclass
class LossComponents:
    rgb: float = 0.0
    depth: float = 0.0
    normal: float = 0.0
    reg: float = 0.0
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        return {"rgb": self.rgb, "depth": self.depth, "normal": self.normal, "reg": self.reg, **self.extras}


# =============================================================================
# PHOTOMETRIC
# =============================================================================
def loss_rgb(color, target):
    """
    Returns:
        (loss, d loss / d color of shape (B, 3))
    """
    color = np.asarray(color, dtype=np.float64)
    diff = color - np.asarray(target, dtype=np.float64)
    n = color.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(color)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


# =============================================================================
# DEPTH
# =============================================================================
def depth_window(t, target, sigma):
    return np.exp(-((t - target[:, None]) ** 2) / (2.0 * sigma * sigma))


def loss_depth(t, deltas, weights, log_trans, target, valid, sigma, form="termination"):
    """
    Uncertainty-aware depth loss.

    Args:
        t: (R, S) sample distances.
        deltas: (R, S) interval lengths.
        weights: (R, S) termination weights.
        log_trans: (R, S) log transmittance (used by the literal form).
        target: (R,) target distance along the ray.
        valid: (R,) rays with a usable target.
        sigma: Gaussian window width, > 0.
        form: "termination" (weights) or "literal" (transmittance).

    Returns:
        (loss, weights cotangent or None, log_trans cotangent or None)
    """
    if sigma <= 0:
        raise InvalidArgumentError("depth sigma must be positive")
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    zeros = np.zeros_like(np.asarray(t, dtype=np.float64))
    if n == 0:
        return 0.0, (zeros if form == "termination" else None), (zeros if form == "literal" else None)
    window = depth_window(t, np.where(valid, target, 0.0), sigma) * deltas * valid[:, None]
    if form == "termination":
        value = -np.sum(np.log(weights + LOG_EPS) * window) / n
        return float(value), -window / (weights + LOG_EPS) / n, None
    if form == "literal":
        value = -np.sum(log_trans * window) / n
        return float(value), None, -window / n
    raise InvalidArgumentError(f"unknown depth loss form {form!r}")


# =============================================================================
# NORMALS
# =============================================================================
def loss_normal(pred, target, valid):
    """
    Returns:
        (loss, d loss / d pred of shape (B, 3))
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return 0.0, grad
    p, q = pred[valid], target[valid]
    cos = np.sum(p * q, axis=1)
    value = np.sum(np.abs(q - p)) + np.sum(np.abs(1.0 - cos))
    grad[valid] = (np.sign(p - q) - np.sign(1.0 - cos)[:, None] * q) / n
    return float(value / n), grad


# =============================================================================
# REGULARIZER
# =============================================================================
def loss_prop(coarse_weights, fine_weights, interval_index):
    """
    Penalize fine mass that a coarse interval does not predict.

    Fine weights are summed per coarse interval and treated as constants.

    Returns:
        (loss, d loss / d coarse_weights)
    """
    R, Sc = coarse_weights.shape
    if R == 0:
        return 0.0, np.zeros_like(coarse_weights)
    rows = np.repeat(np.arange(R), fine_weights.shape[1])
    fine_mass = np.zeros((R, Sc))
    np.add.at(fine_mass, (rows, interval_index.ravel()), fine_weights.ravel())
    excess = np.maximum(fine_mass - coarse_weights, 0.0)
    value = np.sum(excess**2 / (fine_mass + PROP_EPS)) / R
    grad = -2.0 * excess / (fine_mass + PROP_EPS) / R
    return float(value), grad


def loss_distortion(t, deltas, weights):
    """
    sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 delta_i per ray, mean over rays.

    Returns:
        (loss, d loss / d weights)
    """
    R = t.shape[0]
    if R == 0 or t.shape[1] == 0:
        return 0.0, np.zeros_like(weights)
    mid = t + 0.5 * deltas
    gap = np.abs(mid[:, :, None] - mid[:, None, :])
    cross = np.einsum("ri,rij,rj->r", weights, gap, weights)
    single = np.sum(weights**2 * deltas, axis=1) / 3.0
    value = np.sum(cross + single) / R
    grad = (2.0 * np.einsum("rij,rj->ri", gap, weights) + (2.0 / 3.0) * weights * deltas) / R
    return float(value), grad


def loss_reg(coarse_weights, fine_weights, t, deltas, interval_index, dist_weight):
    """
    Proposal consistency plus weighted distortion.

    Returns:
        (loss, coarse cotangent, fine cotangent, enabled) where enabled is
        False when there is no second sampling level
    """
    if coarse_weights.shape[1] == 0 or fine_weights.shape[1] <= coarse_weights.shape[1]:
        return 0.0, np.zeros_like(coarse_weights), np.zeros_like(fine_weights), False
    prop, g_coarse = loss_prop(coarse_weights, fine_weights, interval_index)
    dist, g_fine = loss_distortion(t, deltas, fine_weights)
    return prop + dist_weight * dist, g_coarse, dist_weight * g_fine, True


# =============================================================================
# TOTAL
# =============================================================================
def total_loss(components, config=None):
    """
    Weighted sum of the loss components.

    Raises:
        NumericalFailureError: naming the first non-finite component.
    """
    cfg = config or LossConfig()
    terms = (
        ("rgb", components.rgb, cfg.rgb_weight),
        ("depth", components.depth, cfg.depth_weight),
        ("normal", components.normal, cfg.normal_weight),
        ("reg", components.reg, cfg.reg_weight),
    )
    total = 0.0
    for name, value, weight in terms:
        if not np.isfinite(value):
            raise NumericalFailureError(f"{name} loss is not finite", component=name)
        total += weight * value
    return total
