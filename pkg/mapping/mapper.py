# =============================================================================
# MAPPER - mapping/mapper.py
# =============================================================================
# Joint optimization of the radiance field and the keyframe poses.
#
# One step: draw a ray bundle, render it, evaluate the four losses, run the
# reverse pass and apply adaptive-moment updates to the field (hash / decoder
# learning rates) and to every keyframe pose but the first.
#
# A non-finite loss or gradient skips the step and halves every learning
# rate; `max_skipped_steps` consecutive skips abort with NumericalFailureError.
# =============================================================================

from __future__ import annotations

import logging

import numpy as np

from config import PipelineConfig
from errors import ContractViolationError, NumericalFailureError
from field.model import RadianceField
from field.optim import AdamW
from field.rendering import RenderCotangents, backward_pass, forward_pass, rays_from_poses, render_image
from geometry.lie import se3_exp
from mapping.database import KeyframeDatabase, estimate_aabb
from mapping.losses import (
    LossComponents,
    loss_depth,
    loss_normal,
    loss_reg,
    loss_rgb,
    total_loss,
)

logger = logging.getLogger(__name__)


def batch_losses(batch, bundle, rays, loss_config):
    """
    Evaluate the training losses on a rendered batch.

    Args:
        batch: RenderBatch.
        bundle: RayBundle with the color, depth and normal targets.
        rays: The Rays the batch was rendered from.
        loss_config: LossConfig (weights, depth window and form).

    Returns:
        (LossComponents, RenderCotangents of the weighted total loss)
    """
    lcfg = loss_config
    comps = LossComponents()
    cot = RenderCotangents()

    comps.rgb, cot.color = loss_rgb(batch.color, bundle.color)

    use_depth = lcfg.depth_weight > 0 and np.any(bundle.depth_valid)
    if use_depth:
        # z-depth target -> distance along the ray
        target = bundle.depth / np.maximum(rays.cam_directions[:, 2], 1e-12)
        value, w_bar, lt_bar = loss_depth(
            batch.t, batch.deltas, batch.weights, batch.log_trans, target,
            bundle.depth_valid & batch.hit, lcfg.depth_sigma, lcfg.depth_form,
        )
        comps.depth = value
        cot.weights = None if w_bar is None else lcfg.depth_weight * w_bar
        cot.log_trans = None if lt_bar is None else lcfg.depth_weight * lt_bar

    if lcfg.normal_weight > 0 and np.any(bundle.normal_valid):
        valid = bundle.normal_valid & (batch.normal_norm > 0)
        comps.normal, n_bar = loss_normal(batch.normal, bundle.normal, valid)
        cot.normal = lcfg.normal_weight * n_bar

    if lcfg.reg_weight > 0:
        value, g_coarse, g_fine, enabled = loss_reg(
            batch.coarse_weights, batch.weights, batch.t, batch.deltas,
            batch.interval_index, lcfg.dist_weight,
        )
        comps.reg = value
        comps.extras["reg_enabled"] = enabled
        if enabled:
            cot.coarse_weights = lcfg.reg_weight * g_coarse
            fine = lcfg.reg_weight * g_fine
            cot.weights = fine if cot.weights is None else cot.weights + fine

    cot.color = lcfg.rgb_weight * cot.color
    return comps, cot


class Mapper:
    """
    Owns the keyframe database, the field and the optimizer state.

    Args:
        intr: Intrinsics of every keyframe.
        config: PipelineConfig (field, mapping and loss sections are used).
        telemetry: Optional TelemetryWriter.
        seed: Seed for field initialization and ray sampling.
    """

    def __init__(self, intr, config=None, telemetry=None, seed=0):
        self.cfg = config or PipelineConfig()
        self.intr = intr
        self.database = KeyframeDatabase(self.cfg.mapping)
        self.field = RadianceField(self.cfg.field, seed=seed)
        self.optimizer = AdamW.from_config(self.cfg.mapping)
        self.telemetry = telemetry
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self.skipped = 0
        self.consecutive_skips = 0

    # --- keyframes ------------------------------------------------------------
    def insert_keyframe(self, keyframe):
        inserted = self.database.insert(keyframe, self.step_count)
        if inserted and self.field.aabb is None and len(self.database) >= self.cfg.mapping.warmup_keyframes:
            lo, hi = estimate_aabb(self.database.records, self.intr, self.cfg.field.aabb_margin)
            self.field.set_aabb(lo, hi, freeze=True)
            logger.info("scene box frozen at %s .. %s", np.round(lo, 3), np.round(hi, 3))
        return inserted

    @property
    def ready(self):
        return len(self.database) > 0 and self.field.aabb is not None

    # --- optimization ---------------------------------------------------------
    def _skip(self, reason, component=None):
        self.skipped += 1
        self.consecutive_skips += 1
        self.optimizer.scale_lr(0.5)
        self.field.params.zero_grad()
        logger.warning("step %d skipped (%s), learning rates halved", self.step_count, reason)
        if self.consecutive_skips >= self.cfg.mapping.max_skipped_steps:
            raise NumericalFailureError(
                f"{self.consecutive_skips} consecutive non-finite steps, last: {reason}",
                component=component,
            )

    def step(self):
        """
        One optimization step.

        Returns:
            dict of per-loss values, total, pose update norms and skip state
        """
        if not self.ready:
            raise ContractViolationError("mapping step before the first keyframe")
        mcfg = self.cfg.mapping
        params = self.field.params
        params.zero_grad()

        bundle = self.database.sample_bundle(self.rng, mcfg.batch_rays, self.step_count)
        embedding = bundle.frame_ids if self.cfg.field.appearance_embedding else None
        rays = rays_from_poses(self.database.poses(), self.intr, bundle.frame_index, bundle.us, bundle.vs, embedding)
        want_normal = self.cfg.loss.normal_weight > 0 and bool(np.any(bundle.normal_valid))
        batch = forward_pass(
            self.field, rays, mcfg.coarse_samples, mcfg.fine_samples, self.rng,
            want_normal=want_normal, workers=mcfg.workers,
        )
        comps, cot = batch_losses(batch, bundle, rays, self.cfg.loss)
        metrics = {"step": self.step_count, **comps.as_dict()}
        try:
            total = total_loss(comps, self.cfg.loss)
        except NumericalFailureError as exc:
            self._skip(str(exc), exc.component)
            metrics.update(total=float("nan"), skipped=True)
            self.step_count += 1
            self._emit(metrics)
            return metrics

        pose_grad = backward_pass(self.field, batch, cot, num_poses=len(self.database))
        if not (params.grads_finite() and np.all(np.isfinite(pose_grad))):
            self._skip("non-finite gradient", "gradient")
            metrics.update(total=total, skipped=True)
            self.step_count += 1
            self._emit(metrics)
            return metrics

        self.optimizer.step_params(params)
        pose_norms = self._update_poses(pose_grad) if mcfg.optimize_poses else {}
        self.consecutive_skips = 0
        self.step_count += 1
        metrics.update(
            total=total,
            skipped=False,
            pose_update_max=max(pose_norms.values(), default=0.0),
            opacity=float(np.mean(batch.opacity)) if len(batch) else 0.0,
        )
        self._emit(metrics)
        return metrics

    def _update_poses(self, pose_grad):
        norms = {}
        for k, record in enumerate(self.database.records):
            # first keyframe fixes the gauge
            if k == 0 or not np.any(pose_grad[k]):
                continue
            delta = self.optimizer.update(f"pose.{record.frame_id}", np.zeros(6), pose_grad[k], "pose")
            record.pose = se3_exp(delta) @ record.pose
            record.twist = record.twist + delta
            record.optimized = True
            norms[record.frame_id] = float(np.linalg.norm(delta))
        return norms

    def _emit(self, metrics):
        if self.telemetry is not None:
            self.telemetry.write({"stage": "mapping", **metrics})

    def run(self, steps):
        last = None
        for _ in range(steps):
            last = self.step()
        return last

    # --- outputs --------------------------------------------------------------
    def refined_poses(self):
        return {r.frame_id: r.pose for r in self.database.records}

    def snapshot(self):
        return self.field.snapshot()

    def render_view(self, pose, chunk=4096, embedding_id=None):
        """Full-image render of the current field (training view or novel pose)."""
        mcfg = self.cfg.mapping
        return render_image(
            self.field, pose, self.intr, mcfg.coarse_samples, mcfg.fine_samples, chunk,
            embedding_id=embedding_id,
        )


def optimize_step(mapper):
    """One joint field/pose update; returns the step metrics."""
    return mapper.step()
