# =============================================================================
# MAPPING TESTS - tests/test_mapping.py
# =============================================================================

import logging

import numpy as np
import pytest

from config import LossConfig
from enhancement.depth import DepthMap, NormalMap
from enhancement.enhancer import EnhancedKeyframe
from errors import ContractViolationError, InvalidArgumentError, NumericalFailureError
from geometry.camera import Intrinsics
from geometry.lie import Pose, se3_exp
from mapping.database import KeyframeDatabase, estimate_aabb, insert_keyframe
from mapping.losses import (
    LOG_EPS,
    LossComponents,
    loss_depth,
    loss_distortion,
    loss_normal,
    loss_prop,
    loss_reg,
    loss_rgb,
    total_loss,
)
from mapping.mapper import Mapper, optimize_step
from synth.render import render_groundtruth
from synth.scene import box_room, scene_trajectory
from telemetry import TelemetryWriter

COLOR = np.array([0.8, 0.3, 0.2])


def make_keyframe(intr, frame_id, pose=None, depth=2.0, rgb_only=False, color=COLOR, window_poses=None):
    H, W = intr.height, intr.width
    image = np.broadcast_to(color, (H, W, 3)).copy()
    depth_map = normal_map = None
    if not rgb_only:
        depth_map = DepthMap(np.full((H, W), depth))
        normal_map = NormalMap(np.broadcast_to([0.0, 0.0, -1.0], (H, W, 3)).copy())
    return EnhancedKeyframe(
        frame_id=frame_id,
        timestamp=float(frame_id),
        image=image,
        pose=pose or Pose.identity(),
        depth=depth_map,
        normals=normal_map,
        rgb_only=rgb_only,
        window_poses=window_poses,
    )


# =============================================================================
# LOSSES
# =============================================================================
class TestRgbLoss:
    def test_zero_on_match(self, rng):
        c = rng.uniform(size=(10, 3))
        assert loss_rgb(c, c)[0] == 0.0

    def test_single_ray(self):
        value, grad = loss_rgb(np.array([[0.6, 0.5, 0.5]]), np.array([[0.5, 0.5, 0.5]]))
        assert value == pytest.approx(0.01)
        assert np.allclose(grad, [[0.2, 0.0, 0.0]])

    def test_matches_loop(self, rng):
        pred, target = rng.uniform(size=(32, 3)), rng.uniform(size=(32, 3))
        expected = sum(np.sum((p - t) ** 2) for p, t in zip(pred, target)) / 32
        assert loss_rgb(pred, target)[0] == pytest.approx(expected)


class TestDepthLoss:
    def test_concentrated_termination_is_minimal(self):
        value, _, _ = loss_depth(
            np.array([[2.0]]), np.array([[0.1]]), np.array([[1.0]]), np.zeros((1, 1)),
            np.array([2.0]), np.array([True]), 0.001,
        )
        assert abs(value) < 1e-5

    def test_window_support(self, rng):
        t = np.array([[1.0, 1.2, 1.4]])
        weights = rng.uniform(0.01, 0.3, size=(1, 3))
        value, _, _ = loss_depth(t, np.full((1, 3), 0.2), weights, np.zeros((1, 3)),
                                 np.array([2.0]), np.array([True]), 0.001)
        assert abs(value) < 1e-8

    def test_two_samples_closed_form(self):
        t = np.array([[1.0, 1.5]])
        deltas = np.array([[0.5, 0.5]])
        w = np.array([[0.3, 0.6]])
        sigma, target = 0.2, 1.2
        g = np.exp(-((t[0] - target) ** 2) / (2 * sigma**2))
        expected = -(np.log(0.3 + LOG_EPS) * g[0] * 0.5 + np.log(0.6 + LOG_EPS) * g[1] * 0.5)
        value, w_bar, lt_bar = loss_depth(t, deltas, w, np.zeros_like(t), np.array([target]), np.array([True]), sigma)
        assert value == pytest.approx(expected)
        assert lt_bar is None
        assert np.allclose(w_bar, -g * 0.5 / (w + LOG_EPS))

    def test_literal_form_reads_transmittance(self):
        t = np.array([[1.0, 1.5]])
        log_trans = np.array([[0.0, -0.7]])
        value, w_bar, lt_bar = loss_depth(
            t, np.full((1, 2), 0.5), np.zeros((1, 2)), log_trans, np.array([1.5]), np.array([True]), 0.1,
            form="literal",
        )
        assert w_bar is None
        assert value == pytest.approx(0.7 * 0.5)
        assert lt_bar[0, 1] == pytest.approx(-0.5)

    def test_invalid_rays_are_skipped(self):
        value, w_bar, _ = loss_depth(np.array([[1.0]]), np.array([[0.1]]), np.array([[0.2]]), np.zeros((1, 1)),
                                     np.array([1.0]), np.array([False]), 0.1)
        assert value == 0.0
        assert np.all(w_bar == 0)

    def test_sigma_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            loss_depth(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)), np.zeros((1, 1)), np.ones(1), np.ones(1, bool), 0.0)


class TestNormalLoss:
    def test_zero_on_match(self):
        n = np.array([[0.0, 0.6, 0.8]])
        assert loss_normal(n, n, np.array([True]))[0] == 0.0

    def test_antipodal(self):
        value, _ = loss_normal(np.array([[0.0, 0.0, -1.0]]), np.array([[0.0, 0.0, 1.0]]), np.array([True]))
        assert value == pytest.approx(4.0)

    def test_matches_direct_formula(self, rng):
        p = rng.normal(size=(20, 3))
        q = rng.normal(size=(20, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        valid = rng.random(20) > 0.3
        expected = np.mean([np.sum(np.abs(b - a)) + abs(1 - a @ b) for a, b, ok in zip(p, q, valid) if ok])
        assert loss_normal(p, q, valid)[0] == pytest.approx(expected)

    def test_gradient_matches_finite_differences(self, rng):
        p = rng.normal(size=(6, 3))
        q = rng.normal(size=(6, 3))
        valid = np.ones(6, dtype=bool)
        _, grad = loss_normal(p, q, valid)
        h = 1e-7
        for i in range(6):
            for k in range(3):
                step = np.zeros_like(p)
                step[i, k] = h
                numeric = (loss_normal(p + step, q, valid)[0] - loss_normal(p - step, q, valid)[0]) / (2 * h)
                assert grad[i, k] == pytest.approx(numeric, abs=1e-6)


class TestRegularizer:
    def test_single_bin_distortion(self):
        t = np.array([[0.0, 1.0, 2.0]])
        deltas = np.ones((1, 3))
        w = np.array([[0.0, 0.9, 0.0]])
        assert loss_distortion(t, deltas, w)[0] == pytest.approx(0.9**2 / 3.0)

    def test_zero_weights(self):
        t = np.array([[0.0, 1.0, 2.0]])
        assert loss_distortion(t, np.ones((1, 3)), np.zeros((1, 3)))[0] == 0.0

    def test_distortion_brute_force(self, rng):
        t = np.array([[0.5, 1.1, 2.0]])
        deltas = np.array([[0.6, 0.9, 0.4]])
        w = rng.uniform(size=(1, 3))
        mid = t[0] + 0.5 * deltas[0]
        expected = sum(w[0, i] * w[0, j] * abs(mid[i] - mid[j]) for i in range(3) for j in range(3))
        expected += sum(w[0, i] ** 2 * deltas[0, i] for i in range(3)) / 3.0
        value, grad = loss_distortion(t, deltas, w)
        assert value == pytest.approx(expected)
        h = 1e-7
        for i in range(3):
            step = np.zeros_like(w)
            step[0, i] = h
            numeric = (loss_distortion(t, deltas, w + step)[0] - loss_distortion(t, deltas, w - step)[0]) / (2 * h)
            assert grad[0, i] == pytest.approx(numeric, rel=1e-5)

    def test_proposal_loss_vanishes_when_coarse_covers_fine(self):
        coarse = np.array([[0.2, 0.5, 0.3]])
        fine = np.array([[0.1, 0.1, 0.3, 0.2, 0.1, 0.2]])
        index = np.array([[0, 0, 1, 1, 2, 2]])
        value, grad = loss_prop(coarse, fine, index)
        assert value == 0.0
        assert np.all(grad == 0)
        value, grad = loss_prop(np.array([[0.0, 0.5, 0.3]]), fine, index)
        assert value > 0
        assert grad[0, 0] < 0

    def test_disabled_without_a_second_level(self):
        w = np.full((1, 3), 0.2)
        value, _, _, enabled = loss_reg(w, w, np.ones((1, 3)), np.ones((1, 3)), np.zeros((1, 3), int), 0.002)
        assert value == 0.0
        assert not enabled


class TestTotalLoss:
    def test_default_weights(self):
        assert total_loss(LossComponents()) == 0.0
        assert total_loss(LossComponents(rgb=1.0)) == pytest.approx(1.0)
        assert total_loss(LossComponents(depth=1000.0)) == pytest.approx(1.0)
        assert total_loss(LossComponents(normal=1e5)) == pytest.approx(1.0)

    def test_configured_weights(self):
        cfg = LossConfig(rgb_weight=2.0, reg_weight=0.5)
        assert total_loss(LossComponents(rgb=1.0, reg=1.0), cfg) == pytest.approx(2.5)

    def test_non_finite_component_is_named(self):
        with pytest.raises(NumericalFailureError) as info:
            total_loss(LossComponents(rgb=1.0, depth=float("nan")))
        assert info.value.component == "depth"


# =============================================================================
# KEYFRAME DATABASE
# =============================================================================
class TestDatabase:
    def test_insert_and_duplicates(self, intr, caplog):
        db = KeyframeDatabase()
        assert insert_keyframe(db, make_keyframe(intr, 0)) is db
        with caplog.at_level(logging.WARNING):
            assert not db.insert(make_keyframe(intr, 0))
        assert len(db) == 1
        assert "already in the database" in caplog.text

    def test_rgb_only_record(self, intr):
        db = KeyframeDatabase()
        db.insert(make_keyframe(intr, 4, rgb_only=True))
        record = db.get(4)
        assert record.rgb_only
        assert record.depth is None
        assert np.all(record.twist == 0)

    def test_uint8_images_are_rescaled(self, intr):
        kf = make_keyframe(intr, 0)
        kf.image = np.full((intr.height, intr.width, 3), 255, dtype=np.uint8)
        db = KeyframeDatabase()
        db.insert(kf)
        assert np.allclose(db.get(0).image, 1.0)

    def test_mismatched_rasters_rejected(self, intr):
        kf = make_keyframe(intr, 0)
        kf.depth = DepthMap(np.ones((4, 4)))
        with pytest.raises(InvalidArgumentError):
            KeyframeDatabase().insert(kf)

    def test_window_poses_only_replace_unoptimized(self, intr, make_pose):
        db = KeyframeDatabase()
        db.insert(make_keyframe(intr, 0))
        db.insert(make_keyframe(intr, 1))
        db.get(1).optimized = True
        touched = db.get(1).pose
        new0, new1 = make_pose(), make_pose()
        db.insert(make_keyframe(intr, 2, window_poses={0: new0, 1: new1}))
        assert db.get(0).pose.allclose(new0)
        assert db.get(1).pose is touched

    def test_recent_keyframe_boost(self, intr):
        db = KeyframeDatabase()
        db.insert(make_keyframe(intr, 0), step=0)
        assert np.allclose(db.sampling_distribution(0), [1.0])
        db.insert(make_keyframe(intr, 1), step=10)
        boost = db.cfg.recent_boost
        assert np.allclose(db.sampling_distribution(10), np.array([1.0, boost]) / (1.0 + boost))
        assert np.allclose(db.sampling_distribution(10 + db.cfg.recent_boost_steps), [0.5, 0.5])

    def test_bundle_reads_the_rasters(self, intr, rng):
        db = KeyframeDatabase()
        db.insert(make_keyframe(intr, 0, color=np.array([0.1, 0.2, 0.3])))
        db.insert(make_keyframe(intr, 5, rgb_only=True, color=np.array([0.9, 0.8, 0.7])))
        bundle = db.sample_bundle(rng, 200)
        assert len(bundle) == 200
        assert np.all((bundle.us >= 0) & (bundle.us < intr.width))
        assert np.all((bundle.vs >= 0) & (bundle.vs < intr.height))
        first = bundle.frame_ids == 0
        assert np.allclose(bundle.color[first], [0.1, 0.2, 0.3])
        assert np.all(bundle.depth_valid[first]) and not np.any(bundle.depth_valid[~first])
        assert np.all(bundle.normal_valid[first])

    def test_empty_database_has_no_distribution(self):
        with pytest.raises(ContractViolationError):
            KeyframeDatabase().sampling_distribution(0)

    def test_scene_box_bounds_the_depth(self, intr):
        db = KeyframeDatabase()
        db.insert(make_keyframe(intr, 0, depth=3.0))
        lo, hi = estimate_aabb(db.records, intr, margin=0.1)
        assert lo[2] < 0.0 and hi[2] > 3.0
        assert np.all(hi > lo)


# =============================================================================
# MAPPER
# =============================================================================
class TestMapper:
    def test_step_needs_a_keyframe(self, intr, small_config):
        with pytest.raises(ContractViolationError):
            Mapper(intr, small_config).step()

    def test_solid_color_fit_improves(self, intr, small_config):
        mapper = Mapper(intr, small_config, seed=2)
        mapper.insert_keyframe(make_keyframe(intr, 0))
        assert mapper.ready
        losses = [optimize_step(mapper)["rgb"] for _ in range(60)]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
        assert mapper.step_count == 60

    def test_first_pose_is_frozen(self, intr, small_config):
        mapper = Mapper(intr, small_config, seed=1)
        first = Pose.identity()
        mapper.insert_keyframe(make_keyframe(intr, 0, pose=first))
        mapper.insert_keyframe(make_keyframe(intr, 1, pose=se3_exp([0.05, 0.0, 0.0, 0.0, 0.02, 0.0])))
        mapper.run(15)
        record = mapper.database.get(0)
        assert record.pose is first
        assert np.all(record.twist == 0)
        assert not record.optimized

    def test_zero_weights_disable_geometry_losses(self, intr, small_config):
        small_config.loss.depth_weight = 0.0
        small_config.loss.normal_weight = 0.0
        mapper = Mapper(intr, small_config)
        mapper.insert_keyframe(make_keyframe(intr, 0))
        for _ in range(3):
            metrics = mapper.step()
            assert metrics["depth"] == 0.0
            assert metrics["normal"] == 0.0

    def test_geometry_losses_active_with_depth(self, intr, small_config):
        # a wide window so coarse samples land inside it
        small_config.loss.depth_sigma = 0.5
        mapper = Mapper(intr, small_config)
        mapper.insert_keyframe(make_keyframe(intr, 0))
        metrics = mapper.step()
        assert metrics["depth"] != 0.0
        assert np.isfinite(metrics["total"])

    def test_non_finite_steps_are_skipped_then_abort(self, intr, small_config):
        small_config.mapping.max_skipped_steps = 3
        mapper = Mapper(intr, small_config)
        mapper.insert_keyframe(make_keyframe(intr, 0))
        lr = mapper.optimizer.lr["hash"]
        mapper.field.params.arrays["color.2.b"][:] = np.nan
        assert mapper.step()["skipped"]
        assert mapper.step()["skipped"]
        assert mapper.optimizer.lr["hash"] == pytest.approx(lr / 4)
        with pytest.raises(NumericalFailureError):
            mapper.step()

    def test_steps_are_logged_to_telemetry(self, intr, small_config):
        telemetry = TelemetryWriter()
        mapper = Mapper(intr, small_config, telemetry=telemetry)
        mapper.insert_keyframe(make_keyframe(intr, 0))
        mapper.run(2)
        assert [r["step"] for r in telemetry.records] == [0, 1]
        assert all(r["stage"] == "mapping" for r in telemetry.records)

    def test_same_seed_same_parameters(self, intr, small_config):
        def train():
            mapper = Mapper(intr, small_config, seed=9)
            mapper.insert_keyframe(make_keyframe(intr, 0))
            mapper.run(3)
            return mapper.field.params.arrays

        a, b = train(), train()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_render_view_shapes(self, intr, small_config):
        mapper = Mapper(intr.scaled(0.125), small_config)
        mapper.insert_keyframe(make_keyframe(intr.scaled(0.125), 0))
        view = mapper.render_view(Pose.identity())
        assert view["rgb"].shape == (intr.scaled(0.125).height, intr.scaled(0.125).width, 3)
        assert set(mapper.refined_poses()) == {0}


# =============================================================================
# POSE REFINEMENT
# =============================================================================
def groundtruth_keyframes(intr, poses):
    scene = box_room()
    keyframes = []
    for k, pose in enumerate(poses):
        view = render_groundtruth(scene, pose, intr)
        keyframes.append(EnhancedKeyframe(
            frame_id=k,
            timestamp=float(k),
            image=view.rgb,
            pose=pose,
            depth=DepthMap(view.depth, mask=view.hit),
            normals=NormalMap(view.normals),
        ))
    return keyframes


def center_error(mapper, truth):
    records = mapper.database.records[1:]
    return float(np.mean([np.linalg.norm(r.pose.center - truth[r.frame_id].center) for r in records]))


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1])
def test_joint_steps_pull_noisy_poses_toward_the_truth(small_config, seed):
    intr = Intrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)
    truth = scene_trajectory(box_room(), frames=36)[:4]
    cfg = small_config
    cfg.field.levels = 8
    cfg.field.table_log2 = 12
    cfg.field.density_hidden = 32
    cfg.field.color_hidden = 32
    cfg.mapping.batch_rays = 512
    cfg.mapping.coarse_samples = 16
    cfg.mapping.fine_samples = 16
    cfg.mapping.warmup_keyframes = 4
    cfg.mapping.optimize_poses = False
    cfg.loss.depth_sigma = 0.05

    mapper = Mapper(intr, cfg, seed=seed)
    for keyframe in groundtruth_keyframes(intr, truth):
        mapper.insert_keyframe(keyframe)
    mapper.run(300)

    rng = np.random.default_rng(seed)
    for record in mapper.database.records[1:]:
        record.pose = se3_exp(rng.normal(0.0, 0.03, 6)) @ record.pose
    before = center_error(mapper, truth)

    cfg.mapping.optimize_poses = True
    mapper.optimizer.lr["pose"] = 1e-3
    mapper.run(200)

    assert mapper.database.records[0].pose.allclose(truth[0])
    assert all(r.optimized for r in mapper.database.records[1:])
    assert center_error(mapper, truth) < 0.8 * before
