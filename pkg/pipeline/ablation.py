# =============================================================================
# ABLATIONS - pipeline/ablation.py
# =============================================================================
# Two sweeps:
#   alignment   every scale-alignment strategy on a noisy synthetic depth
#               benchmark (random affine skew + multiplicative noise on the
#               dense prediction, tracker-like sparse depths with a fraction
#               of patches on the wrong surface), scored by aligned-depth
#               RMSE against ground truth
#   losses      full pipeline runs with the depth and/or normal terms
#               switched off, scored with evaluate_run
# =============================================================================

from __future__ import annotations

import copy
import logging
from pathlib import Path

import numpy as np

from config import STRATEGIES, CameraConfig, PipelineConfig
from enhancement.alignment import align_depth
from enhancement.depth import DepthMap, SparseDepthSet
from errors import DegenerateDistributionError, InsufficientDataError
from geometry.camera import Intrinsics
from pipeline.evaluate import evaluate_run
from pipeline.runner import run_pipeline

logger = logging.getLogger(__name__)

SKEW_SCALE = (0.5, 2.0)
SKEW_SHIFT = (-0.5, 0.5)
BENCHMARK_NOISE = 0.02
BENCHMARK_SPARSE = 384  # four keyframes of patch centers
BENCHMARK_MISMATCH = 0.1  # fraction of sparse depths taken from the wrong surface
ORDERING = ("ours", "least-squares", "none")

LOSS_VARIANTS = {
    "full": {},
    "no-depth": {"depth_weight": 0.0},
    "no-normal": {"normal_weight": 0.0},
    "rgb-only": {"depth_weight": 0.0, "normal_weight": 0.0},
}


# =============================================================================
# ALIGNMENT BENCHMARK
# =============================================================================
def alignment_benchmark_case(
    view_depth,
    valid,
    rng,
    noise=BENCHMARK_NOISE,
    sparse_count=BENCHMARK_SPARSE,
    mismatch=BENCHMARK_MISMATCH,
):
    """
    One benchmark case from a ground-truth depth view.

    The dense prediction is the ground truth seen through an unknown affine
    map with multiplicative per-pixel noise. The sparse set plays the
    tracker: exact depths at random patch centers, except that a `mismatch`
    fraction of patches carry the depth of another random surface point
    (patches on occlusion edges or repeated texture that converged to the
    wrong surface).

    Returns:
        (skewed noisy DepthMap, SparseDepthSet, (a, b))
    """
    a = rng.uniform(*SKEW_SCALE)
    b = rng.uniform(*SKEW_SHIFT)
    skewed = (view_depth - b) / a
    skewed = skewed * (1.0 + rng.normal(0.0, noise, size=skewed.shape))
    mask = valid & (skewed > 0)
    rows, cols = np.nonzero(valid)
    pick = rng.choice(rows.size, size=min(sparse_count, rows.size), replace=False)
    pixels = np.stack([cols[pick], rows[pick]], axis=1).astype(np.float64)
    source = pick.copy()
    wrong = rng.random(pick.size) < mismatch
    source[wrong] = rng.integers(0, rows.size, size=int(np.count_nonzero(wrong)))
    sparse = SparseDepthSet(pixels, view_depth[rows[source], cols[source]])
    return DepthMap(skewed, mask=mask), sparse, (a, b)


def alignment_trial(view, rng, noise=BENCHMARK_NOISE, strategies=STRATEGIES, **case_options):
    """
    Aligned-depth RMSE of every strategy on one benchmark case.

    Returns:
        {strategy: rmse}, None for strategies that could not align the case
    """
    dense, sparse, _ = alignment_benchmark_case(view.depth, view.hit, rng, noise, **case_options)
    errors = {}
    for strategy in strategies:
        try:
            result = align_depth(dense, sparse, strategy)
        except (InsufficientDataError, DegenerateDistributionError):
            errors[strategy] = None
            continue
        m = result.depth.mask
        diff = result.depth.values[m] - view.depth[m]
        errors[strategy] = float(np.sqrt(np.mean(diff * diff)))
    return errors


def _benchmark_views(trials, seed, intr):
    from synth.render import render_groundtruth
    from synth.scene import box_room, scene_trajectory

    intr = intr or Intrinsics.from_config(CameraConfig())
    scene = box_room()
    poses = scene_trajectory(scene)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        yield render_groundtruth(scene, poses[int(rng.integers(len(poses)))], intr), rng


def alignment_benchmark(trials=20, seed=0, noise=BENCHMARK_NOISE, intr=None, strategies=STRATEGIES):
    """
    Aligned-depth RMSE per strategy over `trials` random cases rendered
    from the box-room scene.

    Returns:
        list of {"strategy", "rmse", "rmse_std", "failures", "trials"} rows
        in strategy order
    """
    errors = {s: [] for s in strategies}
    failures = {s: 0 for s in strategies}
    for view, rng in _benchmark_views(trials, seed, intr):
        for strategy, rmse in alignment_trial(view, rng, noise, strategies).items():
            if rmse is None:
                failures[strategy] += 1
            else:
                errors[strategy].append(rmse)
    rows = []
    for strategy in strategies:
        e = np.array(errors[strategy])
        rows.append({
            "strategy": strategy,
            "rmse": float(e.mean()) if e.size else float("nan"),
            "rmse_std": float(e.std()) if e.size else float("nan"),
            "failures": failures[strategy],
            "trials": trials,
        })
    return rows


def ordering_rate(chain=ORDERING, trials=20, seed=0, noise=BENCHMARK_NOISE, intr=None):
    """
    Fraction of benchmark cases in which the RMSE of the strategies in
    `chain` is non-decreasing (a failed alignment breaks the chain).
    """
    held = 0
    for view, rng in _benchmark_views(trials, seed, intr):
        errors = alignment_trial(view, rng, noise, tuple(chain))
        values = [errors[s] for s in chain]
        if None not in values and all(x <= y for x, y in zip(values, values[1:])):
            held += 1
    return held / trials if trials else float("nan")


# =============================================================================
# LOSS ABLATION
# =============================================================================
def variant_config(config, overrides):
    cfg = copy.deepcopy(config)
    for key, value in overrides.items():
        setattr(cfg.loss, key, value)
    return cfg


def loss_ablation(config, dataset, out_root, variants=None, strategies=None):
    """
    Run the pipeline once per loss variant (and optionally per alignment
    strategy) and evaluate each run.

    Returns:
        list of metric rows labelled by "run"
    """
    config = config or PipelineConfig()
    variants = variants or list(LOSS_VARIANTS)
    out_root = Path(out_root)
    jobs = [(name, variant_config(config, LOSS_VARIANTS[name])) for name in variants]
    for strategy in strategies or ():
        cfg = copy.deepcopy(config)
        cfg.alignment.strategy = strategy
        jobs.append((f"align-{strategy}", cfg))

    rows = []
    for name, cfg in jobs:
        run_dir = out_root / name
        logger.info("ablation run %s -> %s", name, run_dir)
        run_pipeline(cfg, dataset, run_dir)
        rows.append({"run": name, **evaluate_run(run_dir, dataset, cfg)})
    return rows
