# =============================================================================
# NOVEL VIEW SYNTHESIS - evaluation/novel_view.py
# =============================================================================
# Equally spaced ground-truth frames are mapped into the field's frame with
# the similarity aligning the ground-truth trajectory onto the estimate, then
# rendered and compared to the recorded images.
# =============================================================================

from __future__ import annotations

import logging

import numpy as np

from errors import InsufficientDataError
from evaluation.image import ImageMetrics, image_metrics
from evaluation.trajectory import umeyama_align
from field.rendering import render_image

logger = logging.getLogger(__name__)


def equally_spaced(count, frames):
    """`frames` indices spread evenly over [0, count)."""
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if frames >= count:
        return np.arange(count)
    return np.unique(np.round(np.linspace(0, count - 1, frames)).astype(np.int64))


def evaluation_poses(gt, estimate, frames, with_scale=True):
    """
    Ground-truth poses of the selected frames expressed in the estimate's
    (and therefore the field's) frame.

    Returns:
        (indices into gt, list of Poses)
    """
    index = equally_spaced(len(gt), frames)
    sim, _ = umeyama_align(gt, estimate, with_scale)
    return index, [sim.apply_pose(gt.poses[i]) for i in index]


def evaluate_views(field, intr, poses, references, coarse, fine, chunk=4096):
    """Mean PSNR / SSIM of field renders against reference images."""
    if not poses:
        raise InsufficientDataError("no views to evaluate")
    scores = []
    for pose, reference in zip(poses, references):
        rendered = render_image(field, pose, intr, coarse, fine, chunk, want_normal=False)["rgb"]
        scores.append(image_metrics(rendered, reference))
    return ImageMetrics(
        psnr=float(np.mean([s.psnr for s in scores])),
        ssim=float(np.mean([s.ssim for s in scores])),
    ), scores


def novel_view_metrics(field, intr, gt, estimate, images, frames=125, coarse=64, fine=32):
    """
    Args:
        field: Field snapshot.
        gt: Ground-truth Trajectory (one pose per image).
        estimate: Estimated Trajectory in the field's frame.
        images: Sequence of reference images aligned with gt.

    Returns:
        (mean ImageMetrics, per-frame list)
    """
    index, poses = evaluation_poses(gt, estimate, frames)
    logger.info("novel view protocol over %d frames", len(index))
    return evaluate_views(field, intr, poses, [images[i] for i in index], coarse, fine)
