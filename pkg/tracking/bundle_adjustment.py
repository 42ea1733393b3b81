# =============================================================================
# BUNDLE ADJUSTMENT - tracking/bundle_adjustment.py
# =============================================================================
# Levenberg-damped Gauss-Newton over the window poses and patch inverse
# depths, minimizing
#
#     sum_edges || reproject(patch_k, T_i, T_j) - (r + delta) ||^2_psi
#
# where r + delta is the goal pixel stored on the edge. Depths are
# eliminated with the Schur complement; a dense solve of the full normal
# equations is kept for verification.
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from errors import InvalidArgumentError, NumericalFailureError
from geometry.lie import rotation_matrices, se3_exp
from geometry.patch import relative_transform, reproject_points, reprojection_jacobians

logger = logging.getLogger(__name__)

MIN_STEP = 1e-14


@dataclass
class BAResult:
    poses: dict
    inv_depths: np.ndarray
    cost: float
    initial_cost: float
    status: str
    iterations: int
    accepted: int
    damping: float
    cost_history: list = field(default_factory=list)


# =============================================================================
# PROBLEM VIEW
# =============================================================================
class _Problem:
    """Index bookkeeping shared by the linearization and cost evaluations."""

    def __init__(self, graph, intr, frozen_frames, huber_delta):
        self.graph = graph
        self.intr = intr
        self.huber_delta = huber_delta
        self.frame_ids = graph.frame_ids
        n_frozen = min(max(frozen_frames, 0), len(self.frame_ids))
        self.free_ids = self.frame_ids[n_frozen:]

        lookup = {f: k for k, f in enumerate(self.frame_ids)}
        free = {f: k for k, f in enumerate(self.free_ids)}
        src_frames = graph.edge_source()
        self.src = np.array([lookup[f] for f in src_frames], dtype=np.int64)
        self.dst = np.array([lookup[f] for f in graph.edge_target], dtype=np.int64)
        self.src_free = np.array([free.get(int(f), -1) for f in src_frames], dtype=np.int64)
        self.dst_free = np.array([free.get(int(f), -1) for f in graph.edge_target], dtype=np.int64)

        self.patch_ids, self.edge_var = np.unique(graph.edge_patch, return_inverse=True)
        centers = graph.patch_centers()[graph.edge_patch]
        self.xn, self.yn = intr.normalized(centers[:, 0], centers[:, 1])
        self.goal = graph.edge_goal
        self.weight = graph.edge_weight
        self.active = np.any(self.weight > 0, axis=1)

        bad = self.active & ~np.all(np.isfinite(self.goal), axis=1)
        bad |= ~np.all(np.isfinite(self.weight), axis=1)
        if np.any(bad):
            edge = int(np.flatnonzero(bad)[0])
            raise NumericalFailureError(f"edge {edge} has a non-finite goal or weight", edge=edge)
        if np.any(self.weight < 0):
            raise InvalidArgumentError("edge confidences must be non-negative")

    @property
    def num_poses(self):
        return len(self.free_ids)

    @property
    def num_depths(self):
        return self.patch_ids.size

    def relative(self, R, t):
        return relative_transform(R[self.src], t[self.src], R[self.dst], t[self.dst])

    def robust_weights(self, err):
        """Per-axis weights psi, scaled by the Huber factor when enabled."""
        w = self.weight.copy()
        if self.huber_delta > 0:
            scaled = np.sqrt(w) * np.abs(err)
            factor = np.where(scaled > self.huber_delta, self.huber_delta / np.maximum(scaled, 1e-300), 1.0)
            w = w * factor
        return w

    def cost_terms(self, err):
        w = self.weight
        if self.huber_delta <= 0:
            return w * err**2
        scaled = np.sqrt(w) * np.abs(err)
        k = self.huber_delta
        return np.where(scaled <= k, scaled**2, 2.0 * k * scaled - k**2)

    def check_finite(self, err, valid):
        bad = self.active & valid & ~np.all(np.isfinite(err), axis=1)
        if np.any(bad):
            edge = int(np.flatnonzero(bad)[0])
            raise NumericalFailureError(f"non-finite residual on edge {edge}", edge=edge)

    def evaluate(self, R, t, depths):
        """Cost and the validity mask for a candidate state."""
        R_ij, t_ij = self.relative(R, t)
        d = depths[self.edge_var]
        pix, valid = reproject_points(
            self.xn * self.intr.fx + self.intr.cx,
            self.yn * self.intr.fy + self.intr.cy,
            d, R_ij, t_ij, self.intr,
        )
        err = pix - self.goal
        self.check_finite(err, valid)
        use = self.active & valid
        terms = self.cost_terms(np.where(use[:, None], err, 0.0))
        return float(np.sum(terms[use])), valid

    def linearize(self, R, t, depths):
        R_ij, t_ij = self.relative(R, t)
        d = depths[self.edge_var]
        pix, J_i, J_j, J_d, valid = reprojection_jacobians(self.xn, self.yn, d, R_ij, t_ij, self.intr)
        err = pix - self.goal
        self.check_finite(err, valid)
        use = self.active & valid
        err = np.where(use[:, None], err, 0.0)
        W = self.robust_weights(err) * use[:, None]
        return err, W, J_i, J_j, J_d


# =============================================================================
# NORMAL EQUATIONS
# =============================================================================
def _assemble(problem, err, W, J_i, J_j, J_d):
    n, m = problem.num_poses, problem.num_depths
    si, sj, pv = problem.src_free, problem.dst_free, problem.edge_var

    JiW = J_i * W[:, :, None]
    JjW = J_j * W[:, :, None]
    B = np.zeros((n, n, 6, 6))
    E = np.zeros((n, m, 6))
    g_pose = np.zeros((n, 6))

    mi = si >= 0
    mj = sj >= 0
    mij = mi & mj
    if np.any(mi):
        np.add.at(B, (si[mi], si[mi]), np.einsum("eka,ekb->eab", JiW[mi], J_i[mi]))
        np.add.at(E, (si[mi], pv[mi]), np.einsum("eka,ek->ea", JiW[mi], J_d[mi]))
        np.add.at(g_pose, si[mi], -np.einsum("eka,ek->ea", JiW[mi], err[mi]))
    if np.any(mj):
        np.add.at(B, (sj[mj], sj[mj]), np.einsum("eka,ekb->eab", JjW[mj], J_j[mj]))
        np.add.at(E, (sj[mj], pv[mj]), np.einsum("eka,ek->ea", JjW[mj], J_d[mj]))
        np.add.at(g_pose, sj[mj], -np.einsum("eka,ek->ea", JjW[mj], err[mj]))
    if np.any(mij):
        cross = np.einsum("eka,ekb->eab", JiW[mij], J_j[mij])
        np.add.at(B, (si[mij], sj[mij]), cross)
        np.add.at(B, (sj[mij], si[mij]), np.swapaxes(cross, 1, 2))

    C = np.zeros(m)
    g_depth = np.zeros(m)
    np.add.at(C, pv, np.sum(W * J_d**2, axis=1))
    np.add.at(g_depth, pv, -np.sum(W * J_d * err, axis=1))

    B = B.transpose(0, 2, 1, 3).reshape(6 * n, 6 * n)
    E = E.transpose(0, 2, 1).reshape(6 * n, m)
    return B, E, C, g_pose.reshape(-1), g_depth


def _solve_schur(B, E, C, g_pose, g_depth, damping):
    C_inv = 1.0 / (C + damping)
    if B.shape[0] == 0:
        return np.zeros(0), C_inv * g_depth
    S = B + damping * np.eye(B.shape[0]) - (E * C_inv) @ E.T
    rhs = g_pose - E @ (C_inv * g_depth)
    dp = cho_solve(cho_factor(S), rhs)
    dd = C_inv * (g_depth - E.T @ dp)
    return dp, dd


def _solve_dense(B, E, C, g_pose, g_depth, damping):
    n = B.shape[0]
    H = np.block([[B, E], [E.T, np.diag(C)]]) + damping * np.eye(n + C.size)
    x = cho_solve(cho_factor(H), np.concatenate([g_pose, g_depth]))
    return x[:n], x[n:]


# =============================================================================
# SOLVER
# =============================================================================
def ba_step(
    graph,
    intr,
    iterations=4,
    damping=1e-4,
    frozen_frames=1,
    damping_cap=1e4,
    depth_floor=1e-4,
    huber_delta=0.0,
    solver="schur",
):
    """
    Run damped Gauss-Newton iterations on the window and write the result
    back into the graph.

    Args:
        graph: PatchGraph whose edges carry goal pixels and confidences.
        intr: Intrinsics.
        iterations: Number of Gauss-Newton iterations n.
        damping: Initial Levenberg damping lambda.
        frozen_frames: Oldest window frames held fixed (gauge), >= 1.
        damping_cap: Above this damping the solve gives up as "stalled".
        depth_floor: Inverse depths are clamped to at least this value.
        huber_delta: Huber threshold on whitened residuals, 0 disables.
        solver: "schur" (depths eliminated) or "dense".

    Returns:
        BAResult
    """
    if frozen_frames < 1:
        raise InvalidArgumentError("at least one frame must be frozen")
    if solver not in ("schur", "dense"):
        raise InvalidArgumentError(f"unknown solver {solver!r}")
    solve = _solve_schur if solver == "schur" else _solve_dense

    problem = _Problem(graph, intr, frozen_frames, huber_delta)
    R, t = graph.pose_arrays(problem.frame_ids)
    poses = [graph.pose(f) for f in problem.frame_ids]
    depths = graph.inv_depth[problem.patch_ids].copy()
    n_frozen = len(problem.frame_ids) - problem.num_poses

    cost, valid = problem.evaluate(R, t, depths) if graph.num_edges else (0.0, np.zeros(0, bool))
    initial_cost = cost
    history = [cost]
    status = "ok"
    accepted = 0
    lam = damping
    it = 0

    if graph.num_edges == 0 or (problem.num_poses == 0 and problem.num_depths == 0):
        status = "converged"
        iterations = 0

    for it in range(1, iterations + 1):
        err, W, J_i, J_j, J_d = problem.linearize(R, t, depths)
        B, E, C, g_pose, g_depth = _assemble(problem, err, W, J_i, J_j, J_d)
        try:
            dp, dd = solve(B, E, C, g_pose, g_depth, lam)
            if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(dd))):
                raise LinAlgError("non-finite step")
        except LinAlgError:
            lam *= 10.0
            logger.debug("singular reduced system, damping -> %.3g", lam)
            if lam > damping_cap:
                status = "stalled"
                break
            continue

        step = max(np.max(np.abs(dp), initial=0.0), np.max(np.abs(dd), initial=0.0))
        if step < MIN_STEP:
            status = "converged"
            break

        trial_poses = list(poses)
        for k in range(problem.num_poses):
            trial_poses[n_frozen + k] = se3_exp(dp[6 * k:6 * k + 6]) @ poses[n_frozen + k]
        trial_R, trial_t = rotation_matrices(trial_poses)
        trial_depths = np.maximum(depths + dd, depth_floor)
        trial_cost, trial_valid = problem.evaluate(trial_R, trial_t, trial_depths)

        lost = np.any(problem.active & valid & ~trial_valid)
        if trial_cost <= cost and not lost:
            poses, R, t, depths = trial_poses, trial_R, trial_t, trial_depths
            cost, valid = trial_cost, trial_valid
            history.append(cost)
            accepted += 1
            lam = lam / 2.0
        else:
            lam *= 10.0
            if lam > damping_cap:
                status = "stalled"
                break

    if status == "stalled":
        logger.warning("bundle adjustment stalled at damping %.3g (cost %.4g)", lam, cost)

    for f, pose in zip(problem.frame_ids, poses):
        graph.set_pose(f, pose)
    graph.inv_depth[problem.patch_ids] = depths

    return BAResult(
        poses={f: p for f, p in zip(problem.frame_ids, poses)},
        inv_depths=graph.inv_depth.copy(),
        cost=cost,
        initial_cost=initial_cost,
        status=status,
        iterations=it,
        accepted=accepted,
        damping=lam,
        cost_history=history,
    )


def ba_cost(graph, intr, huber_delta=0.0):
    """Current value of the weighted reprojection cost."""
    if graph.num_edges == 0:
        return 0.0
    problem = _Problem(graph, intr, 1, huber_delta)
    R, t = graph.pose_arrays(problem.frame_ids)
    return problem.evaluate(R, t, graph.inv_depth[problem.patch_ids])[0]
