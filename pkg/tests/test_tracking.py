# =============================================================================
# TRACKING TESTS - tests/test_tracking.py
# =============================================================================

import json

import numpy as np
import pytest
from scipy.stats import chisquare

from config import TrackerConfig
from errors import InvalidArgumentError, ProviderError
from evaluation.trajectory import Trajectory, ate_rmse, umeyama_align
from geometry.lie import Pose, se3_exp
from geometry.patch import Patch
from synth.scene import look_at
from tracking.bundle_adjustment import ba_cost, ba_step
from tracking.graph import PatchGraph, build_edges
from tracking.keyframing import KeyframeDecision, SlidingWindow, keyframe_decision
from tracking.providers import ZeroFlowProvider
from tracking.sampling import sample_patches
from tracking.tracker import Tracker


# =============================================================================
# HELPERS
# =============================================================================
def orbit_poses(n=8, radius=0.6):
    angles = np.linspace(0.0, 0.6, n)
    eyes = np.stack([radius * np.sin(angles), 0.1 * np.cos(3 * angles), -radius * np.cos(angles) + radius], 1)
    return [look_at(eye, [0.0, 0.0, 3.0], up=np.array([0.0, -1.0, 0.0])) for eye in eyes]


def synthetic_graph(intr, poses, per_frame=12, seed=0, extra=None):
    """Window graph whose edge goals are the exact reprojections under `poses`."""
    rng = np.random.default_rng(seed)
    graph = PatchGraph(3)
    for f, pose in enumerate(poses):
        graph.add_frame(f, float(f), pose, np.zeros((intr.height, intr.width)))
        us = rng.uniform(8, intr.width - 8, per_frame)
        vs = rng.uniform(8, intr.height - 8, per_frame)
        d = rng.uniform(0.25, 0.5, per_frame)
        graph.add_patches([Patch.centered(f, u, v, 3, di) for u, v, di in zip(us, vs, d)])
    if extra is not None:
        graph.add_patches([extra])
    build_edges(graph, 0)
    goals, valid = graph.reproject_edges(intr)
    assert valid.all()
    graph.set_corrections(np.zeros_like(goals), np.ones_like(goals), goals)
    return graph


# =============================================================================
# SAMPLING
# =============================================================================
def test_single_patch_on_minimal_image():
    (patch,) = sample_patches(np.zeros((3, 3)), 1, 3, rng_seed=0)
    np.testing.assert_allclose(patch.center, [1.0, 1.0])


def test_sampling_is_deterministic():
    image = np.zeros((96, 128))
    a = sample_patches(image, 96, 3, rng_seed=7)
    b = sample_patches(image, 96, 3, rng_seed=7)
    assert all(np.array_equal(p.pixel_us, q.pixel_us) and np.array_equal(p.pixel_vs, q.pixel_vs) for p, q in zip(a, b))


def test_sampled_centers_are_uniform():
    image = np.zeros((20, 30))
    patches = sample_patches(image, 10_000, 3, rng_seed=3)
    us = np.array([p.center[0] for p in patches]).astype(int)
    counts = np.bincount(us - 1, minlength=28)
    assert counts.size == 28
    assert chisquare(counts).pvalue > 0.01


def test_patches_stay_inside_image(intr):
    patches = sample_patches(np.zeros((intr.height, intr.width)), 200, 5, rng_seed=1)
    assert all(p.inside(intr) for p in patches)


def test_image_smaller_than_patch():
    with pytest.raises(InvalidArgumentError):
        sample_patches(np.zeros((2, 2)), 1, 3, rng_seed=0)


# =============================================================================
# EDGES
# =============================================================================
def line_graph(frames, patches_per_frame=1):
    graph = PatchGraph(3)
    for f in range(frames):
        graph.add_frame(f, float(f), Pose.identity(), np.zeros((8, 8)))
        graph.add_patches([Patch.centered(f, 4.0, 4.0, 3, 1.0) for _ in range(patches_per_frame)])
    return graph


def test_single_frame_has_no_edges():
    assert build_edges(line_graph(1), 2) == set()


def test_edges_respect_radius():
    graph = line_graph(5)
    edges = build_edges(graph, 2)
    assert {j for k, i, j in edges if i == 2} == {0, 1, 3, 4}
    assert {j for k, i, j in edges if i == 0} == {1, 2}


@pytest.mark.parametrize("frames,per_frame,radius", [(6, 3, 1), (7, 2, 3), (4, 5, 0)])
def test_edge_count_matches_enumeration(frames, per_frame, radius):
    graph = line_graph(frames, per_frame)
    edges = build_edges(graph, radius)
    r = frames if radius == 0 else radius
    expected = sum(
        per_frame for i in range(frames) for j in range(frames) if i != j and abs(i - j) <= r
    )
    assert len(edges) == expected


def test_build_edges_keeps_existing_edges():
    graph = line_graph(3)
    first = build_edges(graph, 1)
    graph.add_frame(3, 3.0, Pose.identity(), np.zeros((8, 8)))
    second = build_edges(graph, 1)
    assert first <= second


def test_remove_frame_drops_its_edges():
    graph = line_graph(4)
    build_edges(graph, 0)
    graph.remove_frame(1)
    assert all(i != 1 and j != 1 for _, i, j in graph.edge_set())


# =============================================================================
# BUNDLE ADJUSTMENT
# =============================================================================
def test_ground_truth_is_a_fixed_point(intr):
    poses = orbit_poses()
    graph = synthetic_graph(intr, poses)
    result = ba_step(graph, intr, iterations=3)
    assert result.initial_cost < 1e-18
    for f, pose in enumerate(poses):
        assert result.poses[f].allclose(pose, atol=1e-9)


def test_converges_from_perturbed_poses(intr):
    gt = orbit_poses()
    rng = np.random.default_rng(11)
    graph = synthetic_graph(intr, gt)
    for f in range(1, len(gt)):
        graph.set_pose(f, se3_exp(rng.normal(0.0, 0.01, 6)) @ gt[f])
    before = ba_cost(graph, intr)
    result = ba_step(graph, intr, iterations=20, frozen_frames=1)
    assert result.cost < before

    stamps = np.arange(len(gt), dtype=float)
    est = Trajectory(stamps, [result.poses[f] for f in range(len(gt))])
    _, aligned = umeyama_align(est, Trajectory(stamps, gt))
    assert ate_rmse(aligned, Trajectory(stamps, gt)) < 1e-4


def perturbed_graph(intr, gt, seed, sigma=0.01):
    rng = np.random.default_rng(seed)
    graph = synthetic_graph(intr, gt, seed=seed)
    for f in range(1, len(gt)):
        graph.set_pose(f, se3_exp(rng.normal(0.0, sigma, 6)) @ gt[f])
    return graph


def test_converges_for_nearly_every_seed(intr):
    gt = orbit_poses()
    stamps = np.arange(len(gt), dtype=float)
    truth = Trajectory(stamps, gt)
    converged = 0
    for seed in range(100):
        result = ba_step(perturbed_graph(intr, gt, seed), intr, iterations=20, frozen_frames=1)
        assert result.iterations <= 20
        assert np.all(np.diff(result.cost_history) <= 0.0), seed
        _, aligned = umeyama_align(Trajectory(stamps, [result.poses[f] for f in range(len(gt))]), truth)
        converged += ate_rmse(aligned, truth) < 1e-4
    assert converged >= 95


def test_solution_moves_with_the_gauge(intr):
    gt = orbit_poses()
    gauge = se3_exp([0.3, -0.2, 0.5, 0.2, -0.4, 0.1])
    moved = perturbed_graph(intr, gt, seed=7)
    for f in range(len(gt)):
        moved.set_pose(f, moved.pose(f) @ gauge.inverse())
    base = ba_step(perturbed_graph(intr, gt, seed=7), intr, iterations=10)
    shifted = ba_step(moved, intr, iterations=10)
    for f, pose in base.poses.items():
        assert shifted.poses[f].allclose(pose @ gauge.inverse(), atol=1e-7)
    np.testing.assert_allclose(shifted.inv_depths, base.inv_depths, atol=1e-7)


def test_schur_matches_dense_solve(intr):
    gt = orbit_poses(5)
    rng = np.random.default_rng(5)
    a = synthetic_graph(intr, gt, per_frame=6)
    for f in range(1, len(gt)):
        a.set_pose(f, se3_exp(rng.normal(0.0, 0.01, 6)) @ gt[f])
    b = a.snapshot()
    ra = ba_step(a, intr, iterations=1, solver="schur")
    rb = ba_step(b, intr, iterations=1, solver="dense")
    for f in ra.poses:
        assert ra.poses[f].allclose(rb.poses[f], atol=1e-6)


def test_zero_confidence_patch_is_ignored(intr):
    gt = orbit_poses(6)
    rng = np.random.default_rng(2)
    noise = [se3_exp(rng.normal(0.0, 0.01, 6)) for _ in gt]

    clean = synthetic_graph(intr, gt, per_frame=8)
    bad = Patch.centered(2, 60.0, 40.0, 3, 0.4)
    dirty = synthetic_graph(intr, gt, per_frame=8, extra=bad)
    k = dirty.num_patches - 1
    hit = dirty.edge_patch == k
    dirty.edge_goal[hit] += 50.0
    dirty.edge_weight[hit] = 0.0

    for graph in (clean, dirty):
        for f in range(1, len(gt)):
            graph.set_pose(f, noise[f] @ gt[f])
    ra = ba_step(clean, intr, iterations=5)
    rb = ba_step(dirty, intr, iterations=5)
    for f in ra.poses:
        assert ra.poses[f].allclose(rb.poses[f], atol=1e-9)


def test_requires_a_frozen_frame(intr):
    graph = synthetic_graph(intr, orbit_poses(3))
    with pytest.raises(InvalidArgumentError):
        ba_step(graph, intr, frozen_frames=0)


def test_inverse_depths_stay_positive(intr):
    gt = orbit_poses(4)
    graph = synthetic_graph(intr, gt, per_frame=6)
    graph.edge_goal += np.random.default_rng(0).normal(0.0, 20.0, graph.edge_goal.shape)
    ba_step(graph, intr, iterations=10, depth_floor=1e-4)
    assert np.all(graph.inv_depth >= 1e-4)


# =============================================================================
# KEYFRAME POLICY
# =============================================================================
def test_flow_above_threshold_keeps_candidate():
    window = SlidingWindow(10, 16.0, frame_ids=[0, 1, 2, 3, 4])
    decision, frame = keyframe_decision(window, 16.0 + 1e-6)
    assert decision is KeyframeDecision.KEEP
    assert frame == 1


def test_zero_flow_removes_fourth_most_recent():
    window = SlidingWindow(10, 16.0, frame_ids=[0, 1, 2, 3, 4, 5])
    decision, frame = keyframe_decision(window, 0.0)
    assert decision is KeyframeDecision.REMOVE
    assert frame == 2
    assert frame not in window.frame_ids[-3:]


def test_decision_needs_four_frames():
    with pytest.raises(InvalidArgumentError):
        keyframe_decision(SlidingWindow(10, 16.0, frame_ids=[0, 1, 2]), 0.0)


# =============================================================================
# TRACKER
# =============================================================================
def small_tracker(intr, provider=None, **overrides):
    cfg = TrackerConfig(patches_per_frame=8, **overrides)
    return Tracker(intr, provider or ZeroFlowProvider(), cfg, seed=0)


def test_first_three_frames_emit_nothing(intr):
    tracker = small_tracker(intr)
    image = np.zeros((intr.height, intr.width))
    outputs = [tracker.track_frame(image, float(t)) for t in range(3)]
    assert all(not out.secured for out in outputs)


def test_fourth_frame_secures_the_first_once(intr):
    tracker = small_tracker(intr)
    image = np.zeros((intr.height, intr.width))
    secured = []
    for t in range(8):
        secured += [kf.frame_id for kf in tracker.track_frame(image, float(t)).secured]
    assert secured.count(0) == 1
    assert secured[0] == 0


def test_static_camera_keeps_window_bounded(intr):
    tracker = small_tracker(intr)
    image = np.zeros((intr.height, intr.width))
    for t in range(100):
        tracker.track_frame(image, float(t))
        assert len(tracker.window.pending) <= 3
        assert len(tracker.window) <= 6
    assert len(tracker.trajectory()) == 100


def test_provider_failure_drops_the_frame(intr):
    calls = {"n": 0}

    def flaky(graph, images):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("network down")
        return ZeroFlowProvider()(graph, images)

    tracker = small_tracker(intr, flaky)
    image = np.zeros((intr.height, intr.width))
    tracker.track_frame(image, 0.0)
    tracker.track_frame(image, 1.0)
    before = list(tracker.graph.frame_ids)
    out = tracker.track_frame(image, 2.0)
    assert out.dropped
    assert tracker.graph.frame_ids == before
    assert tracker.dropped == [2]


def test_provider_contract_is_checked(intr):
    def negative(graph, images):
        n = graph.num_edges
        return np.zeros((n, 2)), -np.ones((n, 2))

    tracker = small_tracker(intr, negative)
    image = np.zeros((intr.height, intr.width))
    tracker.track_frame(image, 0.0)
    assert tracker.track_frame(image, 1.0).dropped


def test_timestamps_must_increase(intr):
    tracker = small_tracker(intr)
    image = np.zeros((intr.height, intr.width))
    tracker.track_frame(image, 1.0)
    with pytest.raises(InvalidArgumentError):
        tracker.track_frame(image, 1.0)


def test_flush_secures_pending_frames(intr):
    tracker = small_tracker(intr)
    image = np.zeros((intr.height, intr.width))
    for t in range(5):
        tracker.track_frame(image, float(t))
    flushed = tracker.flush()
    assert [kf.frame_id for kf in flushed] == tracker.window.frame_ids[-len(flushed):]
    assert tracker.flush() == []


def test_provider_error_class_is_used(intr):
    def broken(graph, images):
        raise ProviderError("bad")

    tracker = small_tracker(intr, broken)
    image = np.zeros((intr.height, intr.width))
    tracker.track_frame(image, 0.0)
    assert tracker.track_frame(image, 1.0).dropped


def strict_json(line):
    def reject(token):
        raise ValueError(f"non-standard JSON constant {token}")

    return json.loads(line, parse_constant=reject)


def test_debug_dump_writes_invalid_reprojections_as_null(intr, tmp_path, monkeypatch):
    dump = tmp_path / "debug" / "tracker.jsonl"
    tracker = small_tracker(intr, debug_dump=str(dump))
    image = np.zeros((intr.height, intr.width))
    for t in range(4):
        tracker.track_frame(image, float(t))
    graph = tracker.graph
    assert graph.num_edges > 0
    reproject = graph.reproject_edges

    def behind_camera(intrinsics):
        px, ok = reproject(intrinsics)
        px, ok = px.copy(), ok.copy()
        px[0] = np.nan
        ok[0] = False
        return px, ok

    monkeypatch.setattr(graph, "reproject_edges", behind_camera)
    tracker._write_dump(99, 99.0, None)

    records = [strict_json(line) for line in dump.read_text().splitlines()]
    assert len(records) == 5
    last = records[-1]
    assert last["frame"] == 99
    assert last["edges"][0][3:5] == [None, None]
    assert all(isinstance(x, float) for edge in last["edges"][1:] for x in edge[5:])
