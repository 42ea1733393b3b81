# =============================================================================
# SCALE ALIGNMENT - enhancement/alignment.py
# =============================================================================
# Maps an up-to-scale dense depth prediction D_d onto the sparse tracked
# depths D_s with an affine transform D'_d = alpha * D_d + beta.
#
# Strategies:
#   ours           alpha = sigma_s / sigma_d_hat
#                  beta  = mu_d * (mu_s / mu_d_hat - alpha)
#   relaxed        same alpha, beta = mu_s - alpha * mu_d_hat
#   least-squares  closed-form fit of alpha * D_d_hat + beta to D_s
#   min-max        [min, max] of D_d_hat onto [min, max] of D_s
#   none           alpha = 1, beta = 0
#
# Hatted statistics are taken over the dense map sampled at the sparse
# pixels; mu_d is the mean of the whole valid dense map. All standard
# deviations are population (divide by n).
# =============================================================================

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from config import ALIGNED_DEPTH_FLOOR, OUTLIER_MAD, STRATEGIES
from enhancement.depth import DepthMap
from errors import DegenerateDistributionError, InsufficientDataError, InvalidArgumentError

logger = logging.getLogger(__name__)


class AlignmentResult(NamedTuple):
    depth: DepthMap
    alpha: float
    beta: float
    strategy: str


# =============================================================================
# SAMPLING
# =============================================================================
def sparsify_dense(dense, sparse, return_mask=False):
    """
    Read the dense map at the sparse pixel coordinates.

    Samples that fall on invalid (or out-of-image) dense pixels are dropped.

    Args:
        dense: DepthMap.
        sparse: SparseDepthSet.
        return_mask: Also return the boolean mask of kept sparse samples.

    Returns:
        (n_kept,) array of dense samples [, (N,) keep mask]
    """
    height, width = dense.shape
    cols = np.rint(sparse.pixels[:, 0]).astype(np.int64)
    rows = np.rint(sparse.pixels[:, 1]).astype(np.int64)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    keep = inside.copy()
    keep[inside] = dense.mask[rows[inside], cols[inside]]
    if np.count_nonzero(keep) < 2:
        raise InsufficientDataError(
            f"only {np.count_nonzero(keep)} sparse samples hit valid dense pixels"
        )
    samples = dense.values[rows[keep], cols[keep]]
    return (samples, keep) if return_mask else samples


def outlier_mask(depths, max_mad=OUTLIER_MAD):
    """Keep samples within max_mad median absolute deviations of the median."""
    depths = np.asarray(depths, dtype=np.float64)
    keep = np.isfinite(depths) & (depths > 0)
    if max_mad <= 0 or np.count_nonzero(keep) < 3:
        return keep
    median = np.median(depths[keep])
    mad = np.median(np.abs(depths[keep] - median))
    if mad == 0.0:
        return keep
    return keep & (np.abs(depths - median) <= max_mad * mad)


# =============================================================================
# STRATEGIES
# =============================================================================
def _scale_shift(strategy, d_hat, d_s, mu_dense):
    if strategy == "none":
        return 1.0, 0.0

    if strategy in ("ours", "relaxed"):
        sigma_hat = float(np.std(d_hat))
        if sigma_hat == 0.0:
            raise DegenerateDistributionError("sparsified dense depths are constant")
        mu_hat = float(np.mean(d_hat))
        mu_s = float(np.mean(d_s))
        alpha = float(np.std(d_s)) / sigma_hat
        if strategy == "ours":
            return alpha, mu_dense * (mu_s / mu_hat - alpha)
        return alpha, mu_s - alpha * mu_hat

    if strategy == "least-squares":
        A = np.stack([d_hat, np.ones_like(d_hat)], axis=1)
        (alpha, beta), _, rank, _ = np.linalg.lstsq(A, d_s, rcond=None)
        if rank < 2:
            raise DegenerateDistributionError("sparsified dense depths are constant")
        return float(alpha), float(beta)

    if strategy == "min-max":
        span = float(d_hat.max() - d_hat.min())
        if span == 0.0:
            raise DegenerateDistributionError("sparsified dense depths have zero range")
        alpha = float(d_s.max() - d_s.min()) / span
        return alpha, float(d_s.min()) - alpha * float(d_hat.min())

    raise InvalidArgumentError(f"unknown alignment strategy {strategy!r}")


def align_depth(dense, sparse, strategy="ours", outlier_mad=OUTLIER_MAD, depth_floor=ALIGNED_DEPTH_FLOOR):
    """
    Align a dense depth prediction to sparse anchor depths.

    Args:
        dense: DepthMap (up to an unknown affine transform).
        sparse: SparseDepthSet with at least 2 usable samples.
        strategy: One of ours | relaxed | least-squares | min-max | none.
        outlier_mad: Sparse samples further than this many MADs from the
            sparse median are ignored (0 disables).
        depth_floor: Aligned depths below this are clamped and flagged.

    Returns:
        AlignmentResult(depth, alpha, beta, strategy actually used)
    """
    if strategy not in STRATEGIES:
        raise InvalidArgumentError(f"unknown alignment strategy {strategy!r}")
    if len(sparse) < 2:
        raise InsufficientDataError("alignment needs at least 2 sparse samples")

    inlier = outlier_mask(sparse.depths, outlier_mad)
    dropped = len(sparse) - int(np.count_nonzero(inlier))
    if dropped:
        logger.debug("ignoring %d sparse depth outliers", dropped)
    sparse = sparse.subset(inlier)
    if len(sparse) < 2:
        raise InsufficientDataError("fewer than 2 sparse samples survived the outlier guard")

    d_hat, keep = sparsify_dense(dense, sparse, return_mask=True)
    d_s = sparse.depths[keep]
    mu_dense = float(np.mean(dense.valid_values))

    used = strategy
    alpha, beta = _scale_shift(strategy, d_hat, d_s, mu_dense)
    if strategy == "least-squares" and alpha <= 0:
        logger.warning("least-squares alignment gave alpha=%.4g <= 0, falling back to 'ours'", alpha)
        used = "ours"
        alpha, beta = _scale_shift("ours", d_hat, d_s, mu_dense)

    values = alpha * dense.values + beta
    clamped = dense.mask & (values < depth_floor)
    values = np.where(clamped, depth_floor, values)
    values = np.where(dense.mask, values, 0.0)
    aligned = DepthMap(values, mask=dense.mask.copy(), clamped=clamped)
    return AlignmentResult(aligned, float(alpha), float(beta), used)


def least_squares_residual(alpha, beta, d_hat, d_s):
    """Sum of squared residuals of the affine fit."""
    return float(np.sum((alpha * np.asarray(d_hat) + beta - np.asarray(d_s)) ** 2))
