# =============================================================================
# RADIANCE FIELD - field/model.py
# =============================================================================
# position -> hash features -> density decoder -> (density, geo features)
# geo features + SH(view dir) -> color decoder -> rgb
#
# Density uses softplus and is zero outside the scene box. The surface
# normal is the normalized negative density gradient, computed analytically
# through the density decoder and the hash encoding:
#
#     grad rho = sigmoid(o0) * J_hash^T g_h / extent,
#     g_h      = (relu_mask * W1[:, 0]) @ W0^T
#
# and the backward pass differentiates through that chain as well.
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from config import FieldConfig
from errors import ContractViolationError, InvalidArgumentError
from field.hash_encoding import HashGrid
from field.mlp import Linear, ReLU, sigmoid, softplus
from field.params import FieldParams
from field.sh import sh_encode, sh_jacobian

logger = logging.getLogger(__name__)

NORMAL_EPS = 1e-8


@dataclass
class FieldOutput:
    density: np.ndarray  # (N,)
    color: np.ndarray | None  # (N, 3)
    normal: np.ndarray | None  # (N, 3) world frame, zero where undefined
    normal_valid: np.ndarray | None  # (N,)
    gradient: np.ndarray | None  # (N, 3) density gradient
    outside: np.ndarray  # (N,) position was outside the box


class RadianceField:
    """
    Hash-grid radiance field with hand-written reverse mode.

    Args:
        config: FieldConfig.
        aabb: (lo, hi) scene box; may be set later with set_aabb().
        seed: Initialization seed.
        zero_density_output: Start from a constant-density field.
    """

    def __init__(self, config=None, aabb=None, seed=0, zero_density_output=False, params=None):
        self.cfg = config or FieldConfig()
        self.dtype = np.dtype(self.cfg.dtype)
        self.grid = HashGrid(
            self.cfg.levels,
            self.cfg.table_log2,
            self.cfg.features,
            self.cfg.base_resolution,
            self.cfg.growth,
        )
        rng = np.random.default_rng(seed)
        self.params = params or FieldParams.initialize(
            self.cfg, self.grid, rng, zero_density_output=zero_density_output
        )
        self.relu = ReLU()
        self.density0 = Linear(self.params, "density.0")
        self.density1 = Linear(self.params, "density.1")
        self.color0 = Linear(self.params, "color.0")
        self.color1 = Linear(self.params, "color.1")
        self.color2 = Linear(self.params, "color.2")
        self.aabb = None
        self.aabb_frozen = False
        if aabb is not None:
            self.set_aabb(*aabb)

    # --- scene box ------------------------------------------------------------
    def set_aabb(self, lo, hi, freeze=True):
        if self.aabb_frozen:
            raise ContractViolationError("scene box is frozen")
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(hi <= lo):
            raise InvalidArgumentError("scene box must have positive extent")
        self.aabb = (lo, hi)
        self.aabb_frozen = freeze

    @property
    def extent(self):
        return self.aabb[1] - self.aabb[0]

    def normalize(self, x_world):
        if self.aabb is None:
            raise ContractViolationError("scene box not set")
        lo, _ = self.aabb
        return ((np.asarray(x_world, dtype=np.float64) - lo) / self.extent).astype(self.dtype)

    # --- forward --------------------------------------------------------------
    def query(self, x_world, dirs=None, want_normal=False, want_color=True, embedding_ids=None):
        """
        Evaluate the field at world positions.

        Args:
            x_world: (N, 3) positions.
            dirs: (N, 3) unit view directions (world frame), needed for color.
            want_normal: Also compute density-gradient normals.
            want_color: Run the color decoder.
            embedding_ids: (N,) appearance slots when embeddings are enabled.

        Returns:
            FieldOutput, cache for backward()
        """
        x01 = self.normalize(x_world)
        inside = np.all((x01 >= 0) & (x01 <= 1), axis=1)
        h_in, enc = self.grid.encode(x01, self.params.arrays["hash.table"])
        a0 = self.density0.forward(h_in)
        z0 = self.relu.forward(a0)
        o = self.density1.forward(z0)
        o0 = o[:, 0]
        mask_in = inside.astype(self.dtype)
        density = softplus(o0) * mask_in

        cache = {
            "x01": x01, "inside": mask_in, "enc": enc, "h_in": h_in,
            "a0": a0, "z0": z0, "o": o, "want_color": False, "want_normal": False,
        }
        color = None
        if want_color:
            if dirs is None:
                raise InvalidArgumentError("view directions are required for color")
            dirs = np.asarray(dirs, dtype=self.dtype)
            sh = sh_encode(dirs, self.cfg.sh_degree).astype(self.dtype)
            parts = [o[:, 1:], sh]
            if "appearance.table" in self.params.arrays:
                table = self.params.arrays["appearance.table"]
                if embedding_ids is None:
                    emb = np.broadcast_to(table.mean(axis=0), (o.shape[0], table.shape[1]))
                else:
                    emb = table[np.asarray(embedding_ids) % table.shape[0]]
                parts.append(emb)
            c_in = np.concatenate(parts, axis=1)
            a1 = self.color0.forward(c_in)
            z1 = self.relu.forward(a1)
            a2 = self.color1.forward(z1)
            z2 = self.relu.forward(a2)
            a3 = self.color2.forward(z2)
            color = sigmoid(a3)
            cache.update(
                want_color=True, dirs=dirs, c_in=c_in, a1=a1, z1=z1, a2=a2, z2=z2,
                color=color, embedding_ids=embedding_ids,
            )

        normal = normal_valid = gradient = None
        if want_normal:
            W0 = self.params.arrays["density.0.w"]
            w1c = self.params.arrays["density.1.w"][:, 0]
            relu_mask = (a0 > 0).astype(self.dtype)
            g_h = (relu_mask * w1c) @ W0.T
            J = self.grid.jacobian(enc)
            u = np.einsum("nfk,nf->nk", J, g_h)
            s = sigmoid(o0)
            ext = self.extent.astype(self.dtype)
            gradient = s[:, None] * u / ext * mask_in[:, None]
            gnorm = np.linalg.norm(gradient, axis=1)
            normal_valid = gnorm >= NORMAL_EPS
            safe = np.where(normal_valid, gnorm, 1.0)
            normal = np.where(normal_valid[:, None], -gradient / safe[:, None], 0.0)
            cache.update(
                want_normal=True, relu_mask=relu_mask, g_h=g_h, J=J, u=u, s=s, ext=ext,
                gradient=gradient,
            )

        out = FieldOutput(density, color, normal, normal_valid, gradient, ~inside)
        return out, cache

    # --- backward -------------------------------------------------------------
    def backward(self, cache, density_bar, color_bar=None, gradient_bar=None, grads=None):
        """
        Reverse pass for one query() call.

        Args:
            cache: Cache returned by query().
            density_bar: (N,) cotangent of density.
            color_bar: (N, 3) cotangent of color, or None.
            gradient_bar: (N, 3) cotangent of the density gradient, or None.
            grads: Gradient buffers to accumulate into (default: params.grads).

        Returns:
            (x_bar (N, 3) world-position cotangent, dir_bar (N, 3) or None)
        """
        if cache is None or "enc" not in cache:
            raise ContractViolationError("backward called without a forward cache")
        grads = self.params.grads if grads is None else grads
        dt = self.dtype
        o = cache["o"]
        o0 = o[:, 0]
        n = o.shape[0]
        o_bar = np.zeros_like(o)
        s = sigmoid(o0)
        o_bar[:, 0] += np.asarray(density_bar, dtype=dt) * s * cache["inside"]

        dir_bar = None
        if color_bar is not None:
            if not cache["want_color"]:
                raise ContractViolationError("color cotangent without a color forward pass")
            color = cache["color"]
            a3_bar = np.asarray(color_bar, dtype=dt) * color * (1.0 - color)
            z2_bar = self.color2.backward(cache["z2"], a3_bar, grads)
            a2_bar = self.relu.backward(cache["a2"], z2_bar)
            z1_bar = self.color1.backward(cache["z1"], a2_bar, grads)
            a1_bar = self.relu.backward(cache["a1"], z1_bar)
            c_in_bar = self.color0.backward(cache["c_in"], a1_bar, grads)
            geo = self.cfg.geo_features
            sh_dim = self.cfg.sh_degree**2
            o_bar[:, 1:] += c_in_bar[:, :geo]
            sh_bar = c_in_bar[:, geo:geo + sh_dim]
            dir_bar = np.einsum("nj,njk->nk", sh_bar, sh_jacobian(cache["dirs"], self.cfg.sh_degree))
            if "appearance.table" in self.params.arrays and cache["embedding_ids"] is not None:
                emb_bar = c_in_bar[:, geo + sh_dim:]
                table_grad = grads["appearance.table"]
                slots = np.asarray(cache["embedding_ids"]) % table_grad.shape[0]
                np.add.at(table_grad, slots, emb_bar.astype(table_grad.dtype))

        x01_bar = np.zeros((n, 3), dtype=dt)
        if gradient_bar is not None:
            if not cache["want_normal"]:
                raise ContractViolationError("normal cotangent without a normal forward pass")
            gb = np.asarray(gradient_bar, dtype=dt) * cache["inside"][:, None]
            ext = cache["ext"]
            u, g_h, J = cache["u"], cache["g_h"], cache["J"]
            s_n = cache["s"]
            u_bar = s_n[:, None] * gb / ext
            s_bar = np.sum(gb * u / ext, axis=1)
            o_bar[:, 0] += s_bar * s_n * (1.0 - s_n)
            J_bar = g_h[:, :, None] * u_bar[:, None, :]
            g_h_bar = np.einsum("nfk,nk->nf", J, u_bar)
            W0 = self.params.arrays["density.0.w"]
            w1c = self.params.arrays["density.1.w"][:, 0]
            relu_mask = cache["relu_mask"]
            grads["density.0.w"] += (g_h_bar.T @ (relu_mask * w1c)).astype(grads["density.0.w"].dtype)
            grads["density.1.w"][:, 0] += (relu_mask * (g_h_bar @ W0)).sum(axis=0).astype(
                grads["density.1.w"].dtype
            )
            x01_bar += self.grid.jacobian_backward(cache["enc"], J_bar, grads["hash.table"])

        z0_bar = self.density1.backward(cache["z0"], o_bar, grads)
        a0_bar = self.relu.backward(cache["a0"], z0_bar)
        h_bar = self.density0.backward(cache["h_in"], a0_bar, grads)
        x01_bar += self.grid.backward(cache["enc"], h_bar, grads["hash.table"])
        x_bar = x01_bar.astype(np.float64) / self.extent
        return x_bar, dir_bar

    # --- snapshots ------------------------------------------------------------
    def snapshot(self):
        """Immutable copy for evaluation readers."""
        snap = RadianceField.__new__(RadianceField)
        snap.cfg = self.cfg
        snap.dtype = self.dtype
        snap.grid = self.grid
        snap.params = self.params.snapshot()
        snap.relu = self.relu
        snap.density0 = Linear(snap.params, "density.0")
        snap.density1 = Linear(snap.params, "density.1")
        snap.color0 = Linear(snap.params, "color.0")
        snap.color1 = Linear(snap.params, "color.1")
        snap.color2 = Linear(snap.params, "color.2")
        snap.aabb = self.aabb
        snap.aabb_frozen = True
        return snap

    def density(self, x_world):
        """Density only (no color), for mesh extraction and proposal passes."""
        out, _ = self.query(x_world, want_color=False)
        return out.density


def field_query(position, view_dir, field, want_normal=False):
    """
    Query one or many points.

    Returns:
        (density, color, normal or None); normal is None where undefined
        for a single point.
    """
    single = np.ndim(position) == 1
    x = np.atleast_2d(position)
    d = np.atleast_2d(view_dir)
    out, _ = field.query(x, d, want_normal=want_normal)
    if single:
        normal = None
        if want_normal and out.normal_valid[0]:
            normal = out.normal[0]
        return out.density[0], out.color[0], normal
    return out.density, out.color, out.normal if want_normal else None
