# =============================================================================
# VOLUME RENDERING - field/renderer.py
# =============================================================================
# Ray sampling (stratified coarse + inverse-CDF fine) and compositing.
#
#   T_t = exp(-sum_{s<t} rho_s * delta_s)
#   w_t = T_t * (1 - exp(-rho_t * delta_t))
#   C = sum w_t c_t,  D = sum w_t d_t / max(sum w_t, eps),  N = normalize(sum w_t n_t)
#
# The last interval runs to `far` unless an explicit cap is given.
# All kernels are batched over rays: arrays are (R, S).
# =============================================================================

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from errors import InvalidArgumentError

DEPTH_EPS = 1e-10


# =============================================================================
# TYPES
# =============================================================================
@dataclass
class RaySample:
    """Samples along one ray with their field values."""

    origin: np.ndarray
    direction: np.ndarray
    t: np.ndarray
    density: np.ndarray
    color: np.ndarray
    normal: np.ndarray | None = None
    far: float | None = None

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise InvalidArgumentError("ray direction must be unit length")
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise InvalidArgumentError("sample distances must be strictly increasing")
        self.density = np.asarray(self.density, dtype=np.float64)
        if np.any(self.density < 0):
            raise InvalidArgumentError("densities must be non-negative")


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: float
    normal: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    opacity: float
    normal_norm: float = 0.0


# =============================================================================
# SAMPLING
# =============================================================================
def ray_aabb(origins, dirs, lo, hi):
    """
    Slab intersection of rays with a box.

    Returns:
        near (R,), far (R,), hit (R,) with near clamped to >= 0
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t_min = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    t_max = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = np.maximum(np.max(t_min, axis=1), 0.0)
    far = np.min(t_max, axis=1)
    hit = far > near
    return near, np.where(hit, far, near + 1e-6), hit


def stratified_samples(near, far, count, rng=None):
    """One sample per equal-width stratum; midpoints when rng is None."""
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if count == 0:
        return np.zeros((near.size, 0))
    if np.any(far <= near):
        raise InvalidArgumentError("near must be smaller than far")
    jitter = 0.5 if rng is None else rng.uniform(size=(near.size, count))
    u = (np.arange(count)[None, :] + jitter) / count
    return near[:, None] + u * (far - near)[:, None]


def importance_samples(t_coarse, weights, far, count, rng=None):
    """
    Draw fine samples from the piecewise-constant distribution of coarse weights.

    Coarse interval i spans [t_i, t_{i+1}] (the last one ends at far). Rays
    whose weights sum to ~0 fall back to sampling proportional to interval length.
    """
    R, S = t_coarse.shape
    if count == 0 or S == 0:
        return np.zeros((R, 0))
    far = np.asarray(far, dtype=np.float64).reshape(R)
    edges = np.concatenate([t_coarse, far[:, None]], axis=1)
    lengths = np.maximum(np.diff(edges, axis=1), 0.0)
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    total = w.sum(axis=1, keepdims=True)
    empty = total[:, 0] < 1e-12
    w = np.where(empty[:, None], lengths, w)
    total = np.where(empty[:, None], lengths.sum(axis=1, keepdims=True), total)
    pdf = w / np.maximum(total, 1e-300)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    jitter = 0.5 if rng is None else rng.uniform(size=(R, count))
    u = (np.arange(count)[None, :] + jitter) / count

    rows = np.arange(R)[:, None]
    flat_cdf = (cdf + 2.0 * rows).ravel()
    flat_u = (u + 2.0 * rows).ravel()
    pos = np.searchsorted(flat_cdf, flat_u, side="right").reshape(R, count)
    b = np.clip(pos - 1 - rows * (S + 1), 0, S - 1)

    c_lo = np.take_along_axis(cdf, b, axis=1)
    c_hi = np.take_along_axis(cdf, b + 1, axis=1)
    e_lo = np.take_along_axis(edges, b, axis=1)
    e_hi = np.take_along_axis(edges, b + 1, axis=1)
    span = c_hi - c_lo
    frac = np.where(span > 0, (u - c_lo) / np.where(span > 0, span, 1.0), 0.5)
    return e_lo + np.clip(frac, 0.0, 1.0) * (e_hi - e_lo)


def merge_samples(t_coarse, t_fine):
    return np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1, kind="stable")


def coarse_interval_index(t_coarse, t_merged):
    """For each merged sample, the coarse interval it lies in."""
    R, S = t_coarse.shape
    rows = np.arange(R)[:, None]
    span = max(float(np.max(np.abs(t_coarse), initial=0.0)), float(np.max(np.abs(t_merged), initial=0.0))) + 1.0
    flat = (t_coarse + 2.0 * span * rows).ravel()
    q = (t_merged + 2.0 * span * rows).ravel()
    pos = np.searchsorted(flat, q, side="right").reshape(t_merged.shape)
    return np.clip(pos - 1 - rows * S, 0, S - 1)


def sample_ray(origin, direction, near, far, coarse_count, fine_count, density_fn=None, rng=None):
    """
    Sample distances along one ray.

    Args:
        origin, direction: Ray in world coordinates (unit direction).
        near, far: Sampling interval, near < far.
        coarse_count, fine_count: Number of stratified and importance samples.
        density_fn: Callable (M, 3) positions -> (M,) densities used to
            weight the coarse intervals; None means uniform.
        rng: numpy Generator (None gives deterministic midpoints).

    Returns:
        Sorted (coarse_count + fine_count,) sample distances
    """
    if not near < far:
        raise InvalidArgumentError("near must be smaller than far")
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t_c = stratified_samples(near, far, coarse_count, rng)
    if fine_count == 0:
        return t_c[0]
    if density_fn is None:
        weights = np.zeros_like(t_c)
    else:
        dens = np.asarray(density_fn(origin + t_c[0, :, None] * direction), dtype=np.float64)
        weights = composite_weights(dens[None], t_c, np.array([far]))["weights"]
    t_f = importance_samples(t_c, weights, np.array([far]), fine_count, rng)
    return merge_samples(t_c, t_f)[0]


# =============================================================================
# COMPOSITING
# =============================================================================
def interval_lengths(t, far, last_delta=None):
    R, S = t.shape
    deltas = np.zeros((R, S))
    if S == 0:
        return deltas
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    if last_delta is None:
        deltas[:, -1] = np.asarray(far, dtype=np.float64).reshape(R) - t[:, -1]
    else:
        deltas[:, -1] = last_delta
    return np.maximum(deltas, 0.0)


def composite_weights(density, t, far, last_delta=None):
    """
    Transmittance and termination weights for a ray batch.

    Returns:
        dict with deltas, tau, log_trans, trans, alpha, weights, trans_final
    """
    density = np.asarray(density, dtype=np.float64)
    deltas = interval_lengths(t, far, last_delta)
    tau = density * deltas
    cum = np.cumsum(tau, axis=1)
    log_trans = -(cum - tau)
    trans = np.exp(log_trans)
    alpha = -np.expm1(-tau)
    weights = trans * alpha
    trans_final = np.exp(-cum[:, -1]) if t.shape[1] else np.ones(t.shape[0])
    return {
        "deltas": deltas, "tau": tau, "log_trans": log_trans, "trans": trans,
        "alpha": alpha, "weights": weights, "trans_final": trans_final,
    }


def composite_backward(comp, weights_bar, log_trans_bar=None):
    """
    d loss / d tau from cotangents on the weights (and on log transmittance).

    tau_bar_s = w_bar_s T_{s+1} - sum_{t>s} w_bar_t w_t - sum_{t>s} logT_bar_t
    """
    w = comp["weights"]
    trans_next = comp["trans"] * np.exp(-comp["tau"])
    a = weights_bar * w
    suffix = np.cumsum(a[:, ::-1], axis=1)[:, ::-1] - a
    tau_bar = weights_bar * trans_next - suffix
    if log_trans_bar is not None:
        lt = np.cumsum(log_trans_bar[:, ::-1], axis=1)[:, ::-1] - log_trans_bar
        tau_bar = tau_bar - lt
    return tau_bar


def composite_color_depth(comp, t, colors):
    w = comp["weights"]
    opacity = w.sum(axis=1)
    color = np.einsum("rs,rsc->rc", w, colors)
    depth = np.sum(w * t, axis=1) / np.maximum(opacity, DEPTH_EPS)
    return color, depth, opacity


def composite_normals(comp, normals):
    """Normalized composite normal and its pre-normalization magnitude."""
    acc = np.einsum("rs,rsc->rc", comp["weights"], normals)
    norm = np.linalg.norm(acc, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    return acc / safe[:, None], norm, acc


def render_ray(samples, last_delta=None):
    """
    Composite one ray.

    Args:
        samples: RaySample with densities, colors and optional normals.
        last_delta: Length of the last interval; default far - t_last
            (0 when far is unknown).

    Returns:
        RenderOutput
    """
    S = samples.t.size
    if S == 0:
        return RenderOutput(np.zeros(3), 0.0, np.zeros(3), np.zeros(0), np.zeros(0), 0.0)
    far = samples.far if samples.far is not None else samples.t[-1]
    t = samples.t[None]
    comp = composite_weights(samples.density[None], t, np.array([far]), last_delta)
    colors = np.asarray(samples.color, dtype=np.float64).reshape(1, S, 3)
    color, depth, opacity = composite_color_depth(comp, t, colors)
    normal = np.zeros(3)
    normal_norm = 0.0
    if samples.normal is not None:
        n, norm, _ = composite_normals(comp, np.asarray(samples.normal, dtype=np.float64).reshape(1, S, 3))
        normal, normal_norm = n[0], float(norm[0])
    return RenderOutput(
        color=color[0],
        depth=float(depth[0]),
        normal=normal,
        weights=comp["weights"][0],
        transmittance=comp["trans"][0],
        opacity=float(opacity[0]),
        normal_norm=normal_norm,
    )
