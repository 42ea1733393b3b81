# =============================================================================
# HASH GRID ENCODING - field/hash_encoding.py
# =============================================================================
# Multi-resolution hash encoding with trilinear interpolation.
#
# Level l has resolution N_l = floor(N_min * b^l). A point x in [0,1]^3 is
# scaled to x * N_l; its cell corner floor(x * N_l) is clamped to N_l - 1 so
# the 8 corners stay in [0, N_l]. Levels whose (N_l + 1)^3 corners fit the
# table are indexed densely, the others through the spatial hash
#
#     (c_x * 1) XOR (c_y * 2654435761) XOR (c_z * 805459861)  mod T
#
# Besides the usual backward pass the encoder exposes the spatial Jacobian
# d features / d x and its own backward, needed for density-gradient normals.
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)
CORNER_BITS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)
INIT_SCALE = 1e-4


@dataclass
class EncodingCache:
    index: np.ndarray  # (N, L, 8) flat row into the (L*T, F) table
    corners: np.ndarray  # (N, L, 8, F) gathered table entries
    weights: np.ndarray  # (N, L, 8)
    dweights: np.ndarray  # (N, L, 8, 3) d weight / d t
    factors: np.ndarray  # (N, L, 8, 3) per-axis interpolation factors
    inside: np.ndarray  # (N, 3) coordinate was inside [0, 1]
    outside: np.ndarray  # (N,) any coordinate clamped


def level_resolutions(levels, base_resolution, growth):
    return np.floor(base_resolution * growth ** np.arange(levels)).astype(np.int64)


class HashGrid:
    """
    Hash table storage plus the encode / backward kernels.

    The table itself lives in FieldParams under "hash.table" with shape
    (L, T, F); the grid only keeps the static layout.
    """

    def __init__(self, levels, table_log2, features, base_resolution, growth):
        self.levels = levels
        self.table_size = 2**table_log2
        self.features = features
        self.resolutions = level_resolutions(levels, base_resolution, growth)
        self.dense = (self.resolutions + 1) ** 3 <= self.table_size
        self.scale = self.resolutions.astype(np.float64)

    @property
    def output_dim(self):
        return self.levels * self.features

    def init_table(self, rng, dtype):
        shape = (self.levels, self.table_size, self.features)
        return (rng.uniform(-1.0, 1.0, size=shape) * INIT_SCALE).astype(dtype)

    # --- indexing -------------------------------------------------------------
    def corner_index(self, corners):
        """Flat table rows for integer corners (N, L, 8, 3)."""
        res = self.resolutions[None, :, None]
        c = corners
        dense_idx = c[..., 0] + (res + 1) * c[..., 1] + (res + 1) ** 2 * c[..., 2]
        cu = c.astype(np.uint64)
        hashed = (cu[..., 0] * PRIMES[0]) ^ (cu[..., 1] * PRIMES[1]) ^ (cu[..., 2] * PRIMES[2])
        hashed = (hashed % np.uint64(self.table_size)).astype(np.int64)
        idx = np.where(self.dense[None, :, None], dense_idx, hashed)
        offset = (np.arange(self.levels) * self.table_size)[None, :, None]
        return idx + offset

    # --- forward --------------------------------------------------------------
    def encode(self, x01, table):
        """
        Encode positions.

        Args:
            x01: (N, 3) positions normalized to the unit cube.
            table: (L, T, F) hash table.

        Returns:
            features (N, L*F), EncodingCache
        """
        x01 = np.asarray(x01)
        inside = (x01 >= 0.0) & (x01 <= 1.0)
        outside = ~np.all(inside, axis=1)
        if np.any(outside):
            logger.debug("%d positions clamped to the unit cube", int(outside.sum()))
        x = np.clip(x01, 0.0, 1.0)

        scaled = x[:, None, :] * self.scale[None, :, None]  # (N, L, 3)
        base = np.minimum(np.floor(scaled), (self.resolutions - 1)[None, :, None]).astype(np.int64)
        t = (scaled - base).astype(table.dtype)
        corners = base[:, :, None, :] + CORNER_BITS[None, None]  # (N, L, 8, 3)
        index = self.corner_index(corners)

        bits = CORNER_BITS[None, None].astype(bool)
        factors = np.where(bits, t[:, :, None, :], 1.0 - t[:, :, None, :])  # (N, L, 8, 3)
        weights = np.prod(factors, axis=-1)
        sign = (2 * CORNER_BITS - 1).astype(table.dtype)
        dweights = np.empty_like(factors)
        dweights[..., 0] = factors[..., 1] * factors[..., 2] * sign[:, 0]
        dweights[..., 1] = factors[..., 0] * factors[..., 2] * sign[:, 1]
        dweights[..., 2] = factors[..., 0] * factors[..., 1] * sign[:, 2]

        flat = table.reshape(-1, self.features)
        gathered = flat[index]  # (N, L, 8, F)
        feats = np.einsum("nlc,nlcf->nlf", weights, gathered)
        cache = EncodingCache(index, gathered, weights, dweights, factors, inside, outside)
        return feats.reshape(x.shape[0], -1), cache

    def jacobian(self, cache):
        """d features / d x01 as (N, L*F, 3)."""
        J = np.einsum("nlck,nlcf->nlfk", cache.dweights, cache.corners)
        J = J * self.scale[None, :, None, None].astype(J.dtype)
        J = J * cache.inside[:, None, None, :]
        return J.reshape(J.shape[0], -1, 3)

    # --- backward -------------------------------------------------------------
    def _scatter(self, table_grad, index, contrib):
        """Deterministic scatter-add of (N, L, 8, F) contributions into the table gradient."""
        flat_grad = table_grad.reshape(-1, self.features)
        rows = index.ravel()
        size = flat_grad.shape[0]
        for f in range(self.features):
            flat_grad[:, f] += np.bincount(rows, weights=contrib[..., f].ravel(), minlength=size).astype(
                flat_grad.dtype
            )

    def backward(self, cache, grad_features, table_grad):
        """
        Accumulate table gradients and return d loss / d x01.

        Args:
            cache: EncodingCache from encode().
            grad_features: (N, L*F) cotangent.
            table_grad: (L, T, F) accumulator, updated in place.

        Returns:
            (N, 3) position cotangent
        """
        n = grad_features.shape[0]
        g = grad_features.reshape(n, self.levels, self.features)
        self._scatter(table_grad, cache.index, cache.weights[..., None] * g[:, :, None, :])
        proj = np.einsum("nlf,nlcf->nlc", g, cache.corners)
        x_grad = np.einsum("nlc,nlck,l->nk", proj, cache.dweights, self.scale.astype(g.dtype))
        return x_grad * cache.inside

    def jacobian_backward(self, cache, grad_jacobian, table_grad):
        """
        Backward of jacobian(): accumulate table gradients, return d loss / d x01.

        Args:
            grad_jacobian: (N, L*F, 3) cotangent of the Jacobian.
        """
        n = grad_jacobian.shape[0]
        gJ = grad_jacobian.reshape(n, self.levels, self.features, 3) * cache.inside[:, None, None, :]
        scale = self.scale.astype(gJ.dtype)
        contrib = np.einsum("nlfk,nlck->nlcf", gJ, cache.dweights) * scale[None, :, None, None]
        self._scatter(table_grad, cache.index, contrib)

        # second derivatives of the trilinear weights: only mixed terms survive
        f = cache.factors
        sign = (2 * CORNER_BITS - 1).astype(gJ.dtype)
        d2 = np.zeros(f.shape + (3,), dtype=gJ.dtype)
        for k, m, o in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
            val = f[..., o] * sign[:, k] * sign[:, m]
            d2[..., k, m] = val
            d2[..., m, k] = val
        A = np.einsum("nlfk,nlcf->nlck", gJ, cache.corners) * (scale**2)[None, :, None, None]
        x_grad = np.einsum("nlck,nlckm->nm", A, d2)
        return x_grad * cache.inside
