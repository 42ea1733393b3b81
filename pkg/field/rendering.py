# =============================================================================
# BATCHED RENDERING - field/rendering.py
# =============================================================================
# Forward and reverse passes of volume rendering over a ray batch, including
# the gradient with respect to each keyframe pose.
#
# Poses are world-to-camera (R, t) updated on the left, T <- exp(xi) T with
# xi = (v, omega). A ray through pixel (u, v) has unit camera direction d_c,
# origin o = -R^T t and world direction d_w = R^T d_c, so sample s sits at
# x_w = R^T (s d_c - t). To first order in xi:
#
#     dx_w = -R^T v + R^T (x_c x omega),     x_c = s d_c
#
# giving v_bar = -R sum x_bar and omega_bar = sum (R x_bar) x x_c.
# Sample distances are constants of the pass.
# =============================================================================

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from errors import ContractViolationError, InvalidArgumentError
from field.renderer import (
    DEPTH_EPS,
    composite_backward,
    composite_color_depth,
    composite_normals,
    composite_weights,
    coarse_interval_index,
    importance_samples,
    merge_samples,
    ray_aabb,
    stratified_samples,
)
from geometry.lie import rotation_matrices

logger = logging.getLogger(__name__)


# =============================================================================
# RAYS
# =============================================================================
@dataclass
class Rays:
    origins: np.ndarray  # (R, 3) world
    directions: np.ndarray  # (R, 3) world, unit
    cam_directions: np.ndarray  # (R, 3) camera frame, unit
    rotations: np.ndarray  # (R, 3, 3) world-to-camera rotation of the source pose
    frame_index: np.ndarray  # (R,) index of the source pose
    embedding_ids: np.ndarray | None = None

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, index):
        return Rays(
            self.origins[index],
            self.directions[index],
            self.cam_directions[index],
            self.rotations[index],
            self.frame_index[index],
            None if self.embedding_ids is None else self.embedding_ids[index],
        )


def camera_directions(intr, us, vs):
    """Unit camera-frame directions through pixels."""
    xn, yn = intr.normalized(us, vs)
    d = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def rays_from_poses(poses, intr, frame_index, us, vs, embedding_ids=None):
    """
    Build rays for pixels of several posed images.

    Args:
        poses: List of world-to-camera Pose.
        intr: Intrinsics shared by all images.
        frame_index: (R,) index into `poses` for each pixel.
        us, vs: (R,) pixel coordinates.
        embedding_ids: Optional (R,) appearance slots.

    Returns:
        Rays
    """
    frame_index = np.asarray(frame_index, dtype=np.int64)
    R_all, t_all = rotation_matrices(list(poses))
    R = R_all[frame_index]
    t = t_all[frame_index]
    d_c = camera_directions(intr, np.asarray(us, dtype=np.float64), np.asarray(vs, dtype=np.float64))
    d_w = np.einsum("rji,rj->ri", R, d_c)
    origins = -np.einsum("rji,rj->ri", R, t)
    return Rays(origins, d_w, d_c, R, frame_index, embedding_ids)


def rays_from_pose(pose, intr, us, vs, embedding_id=None):
    us = np.asarray(us, dtype=np.float64).ravel()
    vs = np.asarray(vs, dtype=np.float64).ravel()
    ids = None if embedding_id is None else np.full(us.size, embedding_id, dtype=np.int64)
    return rays_from_poses([pose], intr, np.zeros(us.size, dtype=np.int64), us, vs, ids)


# =============================================================================
# FORWARD
# =============================================================================
@dataclass
class RenderBatch:
    """Outputs of forward_pass plus everything backward_pass needs."""

    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,) distance along the ray
    normal: np.ndarray  # (R, 3) camera frame, unit or zero
    normal_norm: np.ndarray  # (R,) pre-normalization magnitude
    opacity: np.ndarray  # (R,)
    weights: np.ndarray  # (R, S)
    trans: np.ndarray  # (R, S)
    log_trans: np.ndarray  # (R, S)
    trans_final: np.ndarray  # (R,)
    t: np.ndarray  # (R, S)
    deltas: np.ndarray  # (R, S)
    far: np.ndarray  # (R,)
    coarse_t: np.ndarray  # (R, Sc)
    coarse_weights: np.ndarray  # (R, Sc)
    coarse_deltas: np.ndarray  # (R, Sc)
    interval_index: np.ndarray  # (R, S) coarse interval of each fine sample
    hit: np.ndarray  # (R,) ray meets the scene box
    rays: Rays
    chunks: list

    def __len__(self):
        return self.color.shape[0]


@dataclass
class RenderCotangents:
    """Loss cotangents on the outputs of one RenderBatch (None = zero)."""

    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None
    weights: np.ndarray | None = None
    log_trans: np.ndarray | None = None
    coarse_weights: np.ndarray | None = None


def _query(field, t, rays, want_color, want_normal):
    R, S = t.shape
    x = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    dirs = np.broadcast_to(rays.directions[:, None, :], (R, S, 3)).reshape(-1, 3)
    ids = None
    if rays.embedding_ids is not None:
        ids = np.repeat(rays.embedding_ids, S)
    out, cache = field.query(
        x.reshape(-1, 3),
        dirs if want_color else None,
        want_normal=want_normal,
        want_color=want_color,
        embedding_ids=ids,
    )
    return out, cache


def _forward_chunk(field, rays, near, far, t_coarse, t_fine, fine_count, rng, want_normal, last_delta):
    R = len(rays)
    out_c, cache_c = _query(field, t_coarse, rays, want_color=False, want_normal=False)
    rho_c = out_c.density.astype(np.float64).reshape(t_coarse.shape)
    comp_c = composite_weights(rho_c, t_coarse, far, last_delta)

    if t_fine is None:
        t_fine = importance_samples(t_coarse, comp_c["weights"], far, fine_count, rng)
    t = merge_samples(t_coarse, t_fine)
    S = t.shape[1]

    out, cache = _query(field, t, rays, want_color=True, want_normal=want_normal)
    rho = out.density.astype(np.float64).reshape(R, S)
    colors = out.color.astype(np.float64).reshape(R, S, 3)
    comp = composite_weights(rho, t, far, last_delta)
    color, depth, opacity = composite_color_depth(comp, t, colors)

    normal_cam = np.zeros((R, 3))
    normal_norm = np.zeros(R)
    normal_world = None
    field_normals = None
    if want_normal:
        field_normals = out.normal.astype(np.float64).reshape(R, S, 3)
        normal_world, normal_norm, _ = composite_normals(comp, field_normals)
        normal_cam = np.einsum("rij,rj->ri", rays.rotations, normal_world)

    state = {
        "rays": rays, "t": t, "far": far, "comp": comp, "colors": colors,
        "cache": cache, "cache_coarse": cache_c, "comp_coarse": comp_c,
        "t_coarse": t_coarse, "field_normals": field_normals,
        "normal_world": normal_world, "normal_cam": normal_cam, "normal_norm": normal_norm,
        "gradient": None if not want_normal else out.gradient.astype(np.float64).reshape(R, S, 3),
        "normal_valid": None if not want_normal else out.normal_valid.reshape(R, S),
        "opacity": opacity, "depth": depth,
    }
    return state, color, depth, normal_cam, normal_norm, opacity


def forward_pass(
    field,
    rays,
    coarse_count,
    fine_count,
    rng=None,
    want_normal=True,
    last_delta=None,
    t_coarse=None,
    t_fine=None,
    workers=1,
):
    """
    Render a ray batch and record what the reverse pass needs.

    Args:
        field: RadianceField with its scene box set.
        rays: Rays.
        coarse_count: Stratified samples per ray.
        fine_count: Importance samples per ray.
        rng: numpy Generator for jitter; None gives deterministic midpoints.
        want_normal: Composite density-gradient normals.
        last_delta: Length of the last interval (default far - t_last).
        t_coarse, t_fine: Explicit (R, Sc) / (R, Sf) sample distances; they
            replace stratified and importance sampling when given.
        workers: Data-parallel ray workers.

    Returns:
        RenderBatch
    """
    if field.aabb is None:
        raise ContractViolationError("scene box not set")
    R = len(rays)
    near, far, hit = ray_aabb(rays.origins, rays.directions, *field.aabb)
    if t_coarse is None:
        t_coarse = stratified_samples(near, far, coarse_count, rng)
    else:
        t_coarse = np.asarray(t_coarse, dtype=np.float64)
        far = np.maximum(far, t_coarse[:, -1] + 1e-9) if t_coarse.shape[1] else far
    if t_fine is not None:
        t_fine = np.asarray(t_fine, dtype=np.float64)
        if t_fine.shape[0] != R:
            raise InvalidArgumentError("fine samples must match the ray count")
        far = np.maximum(far, t_fine.max(axis=1, initial=-np.inf) + 1e-9)

    workers = max(1, int(workers))
    bounds = np.linspace(0, R, min(workers, max(R, 1)) + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    # per-chunk generators keep the draws independent of thread scheduling
    chunk_rngs = [None] * len(slices)
    if rng is not None and len(slices) > 1:
        chunk_rngs = [np.random.default_rng(s) for s in rng.integers(0, 2**63 - 1, size=len(slices))]
    elif rng is not None:
        chunk_rngs = [rng]

    def run(k):
        sl = slices[k]
        return _forward_chunk(
            field, rays.subset(sl), near[sl], far[sl], t_coarse[sl],
            None if t_fine is None else t_fine[sl], fine_count, chunk_rngs[k],
            want_normal, last_delta,
        )

    if len(slices) > 1:
        with ThreadPoolExecutor(max_workers=len(slices)) as pool:
            results = list(pool.map(run, range(len(slices))))
    else:
        results = [run(k) for k in range(len(slices))]

    states = [r[0] for r in results]

    def cat(key, sub=None):
        parts = [s[key] if sub is None else s[key][sub] for s in states]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0,))

    if not states:
        empty = np.zeros((0, 0))
        return RenderBatch(
            np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
            empty, empty, empty, np.zeros(0), empty, empty, far, empty, empty, empty,
            np.zeros((0, 0), dtype=np.int64), hit, rays, [],
        )

    t_all = cat("t")
    t_c = cat("t_coarse")
    return RenderBatch(
        color=np.concatenate([r[1] for r in results]),
        depth=np.concatenate([r[2] for r in results]),
        normal=np.concatenate([r[3] for r in results]),
        normal_norm=np.concatenate([r[4] for r in results]),
        opacity=np.concatenate([r[5] for r in results]),
        weights=cat("comp", "weights"),
        trans=cat("comp", "trans"),
        log_trans=cat("comp", "log_trans"),
        trans_final=cat("comp", "trans_final"),
        t=t_all,
        deltas=cat("comp", "deltas"),
        far=far,
        coarse_t=t_c,
        coarse_weights=cat("comp_coarse", "weights"),
        coarse_deltas=cat("comp_coarse", "deltas"),
        interval_index=coarse_interval_index(t_c, t_all),
        hit=hit,
        rays=rays,
        chunks=list(zip(slices, states)),
    )


# =============================================================================
# BACKWARD
# =============================================================================
def _cot(array, sl):
    return None if array is None else np.asarray(array, dtype=np.float64)[sl]


def _backward_chunk(field, state, cot, grads):
    rays = state["rays"]
    t = state["t"]
    comp = state["comp"]
    R, S = t.shape
    w = comp["weights"]
    w_bar = np.zeros((R, S)) if cot.weights is None else cot.weights.copy()
    color_bar = np.zeros((R, S, 3))
    gradient_bar = None
    omega_bar = np.zeros((R, 3))

    if cot.color is not None:
        w_bar += np.einsum("rc,rsc->rs", cot.color, state["colors"])
        color_bar = w[..., None] * cot.color[:, None, :]

    if cot.depth is not None:
        W = state["opacity"]
        D = state["depth"]
        lit = W > DEPTH_EPS
        scale = np.where(lit, 1.0 / np.maximum(W, DEPTH_EPS), 1.0 / DEPTH_EPS)
        centered = np.where(lit[:, None], t - D[:, None], t)
        w_bar += cot.depth[:, None] * centered * scale[:, None]

    if cot.normal is not None:
        if state["field_normals"] is None:
            raise ContractViolationError("normal cotangent without a normal forward pass")
        n_cam = state["normal_cam"]
        n_hat = state["normal_world"]
        norm = state["normal_norm"]
        omega_bar += np.cross(n_cam, cot.normal)
        n_hat_bar = np.einsum("rij,ri->rj", rays.rotations, cot.normal)
        ok = norm > 0
        proj = n_hat_bar - n_hat * np.sum(n_hat * n_hat_bar, axis=1, keepdims=True)
        acc_bar = np.where(ok[:, None], proj / np.where(ok, norm, 1.0)[:, None], 0.0)
        w_bar += np.einsum("rc,rsc->rs", acc_bar, state["field_normals"])
        n_s_bar = w[..., None] * acc_bar[:, None, :]
        n_s = state["field_normals"]
        g = state["gradient"]
        gnorm = np.linalg.norm(g, axis=2)
        valid = state["normal_valid"]
        tangential = n_s_bar - n_s * np.sum(n_s * n_s_bar, axis=2, keepdims=True)
        gradient_bar = np.where(valid[..., None], -tangential / np.where(valid, gnorm, 1.0)[..., None], 0.0)

    tau_bar = composite_backward(comp, w_bar, cot.log_trans)
    rho_bar = tau_bar * comp["deltas"]

    x_bar, dir_bar = field.backward(
        state["cache"],
        rho_bar.ravel(),
        color_bar=color_bar.reshape(-1, 3),
        gradient_bar=None if gradient_bar is None else gradient_bar.reshape(-1, 3),
        grads=grads,
    )
    x_bar = x_bar.reshape(R, S, 3)
    origin_bar = x_bar.sum(axis=1)
    dir_w_bar = np.einsum("rs,rsk->rk", t, x_bar)
    if dir_bar is not None:
        dir_w_bar += dir_bar.astype(np.float64).reshape(R, S, 3).sum(axis=1)

    if cot.coarse_weights is not None:
        comp_c = state["comp_coarse"]
        tau_c_bar = composite_backward(comp_c, np.asarray(cot.coarse_weights, dtype=np.float64))
        rho_c_bar = tau_c_bar * comp_c["deltas"]
        xc_bar, _ = field.backward(state["cache_coarse"], rho_c_bar.ravel(), grads=grads)
        xc_bar = xc_bar.reshape(rho_c_bar.shape + (3,))
        origin_bar += xc_bar.sum(axis=1)
        dir_w_bar += np.einsum("rs,rsk->rk", state["t_coarse"], xc_bar)

    # x_w = o + s d_w with o = -R^T t, d_w = R^T d_c
    Rm = rays.rotations
    v_bar = -np.einsum("rij,rj->ri", Rm, origin_bar)
    omega_bar += np.cross(np.einsum("rij,rj->ri", Rm, dir_w_bar), rays.cam_directions)
    return np.concatenate([v_bar, omega_bar], axis=1)


def backward_pass(field, batch, cotangents, num_poses=None, grads=None):
    """
    Reverse pass for a RenderBatch.

    Field gradients are accumulated into `grads` (default field.params.grads).
    With several forward chunks each chunk writes its own buffer and the
    buffers are reduced in chunk order.

    Args:
        field: The RadianceField used in forward_pass.
        batch: RenderBatch from forward_pass.
        cotangents: RenderCotangents.
        num_poses: Length of the returned pose-gradient array (default:
            max frame index + 1).

    Returns:
        (P, 6) gradient with respect to the left twist of each source pose
    """
    if batch is None or not isinstance(batch, RenderBatch):
        raise ContractViolationError("backward_pass needs the RenderBatch of a forward pass")
    grads = field.params.grads if grads is None else grads
    if num_poses is None:
        num_poses = int(batch.rays.frame_index.max(initial=-1)) + 1
    pose_grad = np.zeros((num_poses, 6))
    if not batch.chunks:
        return pose_grad

    def run(k):
        sl, state = batch.chunks[k]
        cot = RenderCotangents(
            color=_cot(cotangents.color, sl),
            depth=_cot(cotangents.depth, sl),
            normal=_cot(cotangents.normal, sl),
            weights=_cot(cotangents.weights, sl),
            log_trans=_cot(cotangents.log_trans, sl),
            coarse_weights=_cot(cotangents.coarse_weights, sl),
        )
        buffer = grads if len(batch.chunks) == 1 else field.params.new_grad_buffers()
        return _backward_chunk(field, state, cot, buffer), buffer

    if len(batch.chunks) > 1:
        with ThreadPoolExecutor(max_workers=len(batch.chunks)) as pool:
            results = list(pool.map(run, range(len(batch.chunks))))
        for _, buffer in results:
            for name, g in buffer.items():
                grads[name] += g
    else:
        results = [run(0)]

    for (sl, _), (ray_grad, _) in zip(batch.chunks, results):
        np.add.at(pose_grad, batch.rays.frame_index[sl], ray_grad)
    return pose_grad


# =============================================================================
# IMAGES
# =============================================================================
def render_image(field, pose, intr, coarse_count, fine_count, chunk=4096, want_normal=True, embedding_id=None):
    """
    Render a full view without sampling jitter.

    Returns:
        dict with rgb (H, W, 3), depth (H, W) z-depth, normals (H, W, 3)
        camera frame, opacity (H, W)
    """
    u, v = intr.pixel_grid()
    us, vs = u.ravel(), v.ravel()
    H, W = intr.height, intr.width
    rgb = np.zeros((us.size, 3))
    depth = np.zeros(us.size)
    normals = np.zeros((us.size, 3))
    opacity = np.zeros(us.size)
    for start in range(0, us.size, chunk):
        sl = slice(start, start + chunk)
        rays = rays_from_pose(pose, intr, us[sl], vs[sl], embedding_id)
        batch = forward_pass(field, rays, coarse_count, fine_count, None, want_normal)
        rgb[sl] = batch.color
        depth[sl] = batch.depth * rays.cam_directions[:, 2]
        normals[sl] = batch.normal
        opacity[sl] = batch.opacity
    return {
        "rgb": np.clip(rgb, 0.0, 1.0).reshape(H, W, 3),
        "depth": depth.reshape(H, W),
        "normals": normals.reshape(H, W, 3),
        "opacity": opacity.reshape(H, W),
    }
