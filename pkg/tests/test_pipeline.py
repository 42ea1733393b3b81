# =============================================================================
# PIPELINE TESTS - tests/test_pipeline.py
# =============================================================================

import json
import logging
import threading

import numpy as np
import pytest

import pipeline.runner as runner_module
from config import CameraConfig, PipelineConfig, load_config, save_config
from enhancement.depth import DepthMap, NormalMap
from enhancement.enhancer import EnhancedKeyframe
from errors import InvalidArgumentError, ManifestParseError, StageFailure
from evaluation.trajectory import Trajectory, load_tum, save_tum
from geometry.camera import Intrinsics
from geometry.lie import Pose, se3_exp
from pipeline.ablation import LOSS_VARIANTS, alignment_benchmark, loss_ablation, variant_config
from pipeline.dataset import ingest_dataset, load_intrinsics, parse_manifest, save_intrinsics
from pipeline.evaluate import evaluate_trajectory_files
from pipeline.image_io import DEPTH_SCALE, load_depth, load_rgb, save_depth, save_rgb
from pipeline.keyframes import DUMP_DIR, load_keyframe, load_keyframe_dump, save_keyframe
from pipeline.runner import (
    CHECKPOINT,
    CONFIG,
    SUMMARY,
    TRAJ_REFINED,
    TRAJ_TRACKING,
    Channel,
    map_keyframes,
    refined_trajectory,
    run_pipeline,
)
from synth.export import export_dataset
from synth.scene import box_room
from telemetry import TelemetryWriter, read_telemetry

TINY = Intrinsics(40.0, 40.0, 16.0, 12.0, 32, 24)


@pytest.fixture
def room(tmp_path):
    """Six frames of the box room at 32 x 24."""
    out, _ = export_dataset(box_room(frames=6), TINY, tmp_path / "room")
    return ingest_dataset(out, "synthetic")


@pytest.fixture
def fast_config(small_config):
    small_config.tracker.patches_per_frame = 16
    return small_config


def write_frames(root, stamps, size=(4, 6)):
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, t in enumerate(stamps):
        save_rgb(np.full((*size, 3), 0.5), root / "rgb" / f"{k}.png")
        lines.append(f"{t} rgb/{k}.png")
    (root / "rgb.txt").write_text("# timestamp filename\n" + "\n".join(lines) + "\n")
    save_intrinsics(Intrinsics(5.0, 5.0, 3.0, 2.0, size[1], size[0]), root / "intrinsics.txt")


# =============================================================================
# DATASETS
# =============================================================================
class TestManifest:
    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "rgb.txt"
        path.write_text("# header\n\n0.5 a.png\n1.0 b.png extra\n")
        assert parse_manifest(path) == [(3, 0.5, "a.png"), (4, 1.0, "b.png")]

    def test_out_of_order_timestamps(self, tmp_path):
        path = tmp_path / "rgb.txt"
        path.write_text("0.0 a.png\n1.0 b.png\n1.0 c.png\n")
        with pytest.raises(ManifestParseError) as excinfo:
            parse_manifest(path)
        assert excinfo.value.line == 3

    def test_malformed_lines(self, tmp_path):
        path = tmp_path / "rgb.txt"
        path.write_text("0.0 a.png\nlonely\n")
        with pytest.raises(ManifestParseError) as excinfo:
            parse_manifest(path)
        assert excinfo.value.line == 2
        path.write_text("abc a.png\n")
        with pytest.raises(ManifestParseError):
            parse_manifest(path)


class TestIngestion:
    def test_reads_frames_in_order(self, tmp_path):
        write_frames(tmp_path / "ds", [0.1, 0.2, 0.3])
        dataset = ingest_dataset(tmp_path / "ds")
        assert len(dataset) == 3
        assert np.allclose(dataset.timestamps, [0.1, 0.2, 0.3])
        assert dataset.groundtruth is None
        images = [image for _, image in dataset]
        assert images[0].shape == (4, 6, 3)
        assert len(list(dataset.iter_frames(limit=2))) == 2

    def test_missing_image_is_skipped(self, tmp_path, caplog):
        write_frames(tmp_path / "ds", [0.1, 0.2, 0.3])
        (tmp_path / "ds" / "rgb" / "1.png").unlink()
        with caplog.at_level(logging.WARNING):
            dataset = ingest_dataset(tmp_path / "ds")
        assert [f.timestamp for f in dataset.frames] == [0.1, 0.3]
        assert "missing" in caplog.text

    def test_undecodable_image_is_skipped(self, tmp_path):
        write_frames(tmp_path / "ds", [0.1, 0.2])
        (tmp_path / "ds" / "rgb" / "0.png").write_bytes(b"not a png")
        frames = list(ingest_dataset(tmp_path / "ds"))
        assert [entry.timestamp for entry, _ in frames] == [0.2]

    def test_empty_manifest(self, tmp_path):
        write_frames(tmp_path / "ds", [])
        assert len(ingest_dataset(tmp_path / "ds")) == 0

    def test_intrinsics_fallback(self, tmp_path):
        write_frames(tmp_path / "ds", [0.1])
        (tmp_path / "ds" / "intrinsics.txt").unlink()
        with pytest.raises(InvalidArgumentError):
            ingest_dataset(tmp_path / "ds")
        dataset = ingest_dataset(tmp_path / "ds", camera=CameraConfig())
        assert dataset.intrinsics.width == CameraConfig().width

    def test_bad_inputs(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            ingest_dataset(tmp_path / "nowhere")
        with pytest.raises(InvalidArgumentError):
            ingest_dataset(tmp_path)
        write_frames(tmp_path / "ds", [0.1])
        with pytest.raises(InvalidArgumentError):
            ingest_dataset(tmp_path / "ds", "kitti")
        with pytest.raises(InvalidArgumentError):
            ingest_dataset(tmp_path / "ds", "synthetic")

    def test_synthetic_export(self, room):
        assert len(room) == 6
        assert room.scene is not None
        assert len(room.groundtruth) == 6
        assert all(f.depth_path is not None for f in room.frames)


def test_intrinsics_file(tmp_path):
    save_intrinsics(TINY, tmp_path / "intrinsics.txt")
    loaded = load_intrinsics(tmp_path / "intrinsics.txt")
    assert (loaded.fx, loaded.cx, loaded.width, loaded.height) == (40.0, 16.0, 32, 24)
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(ManifestParseError):
        load_intrinsics(tmp_path / "bad.txt")


def test_image_files(tmp_path, rng):
    image = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
    save_rgb(image, tmp_path / "rgb.png")
    assert np.allclose(load_rgb(tmp_path / "rgb.png"), image)

    depth = rng.uniform(0.5, 4.0, size=(5, 7))
    valid = depth < 3.0
    save_depth(depth, tmp_path / "depth.png", valid=valid)
    loaded, mask = load_depth(tmp_path / "depth.png")
    assert np.array_equal(mask, valid)
    assert np.allclose(loaded[valid], depth[valid], atol=0.5 / DEPTH_SCALE)

    with pytest.raises(InvalidArgumentError):
        load_rgb(tmp_path / "missing.png")


# =============================================================================
# KEYFRAME DUMP
# =============================================================================
def test_keyframe_dump_round_trip(tmp_path, rng):
    depth = DepthMap(rng.uniform(1, 3, size=(4, 6)))
    normals = NormalMap(np.broadcast_to([0.0, 0.0, -1.0], (4, 6, 3)).copy())
    pose = se3_exp([0.1, 0.2, 0.3, 0.01, 0.02, 0.03])
    keyframe = EnhancedKeyframe(7, 1.5, rng.uniform(size=(4, 6, 3)), pose, depth, normals, alpha=2.0, beta=0.1)
    plain = EnhancedKeyframe(3, 0.5, rng.uniform(size=(4, 6, 3)), Pose.identity(), None, None, rgb_only=True)
    save_keyframe(keyframe, tmp_path / DUMP_DIR)
    loaded = load_keyframe(save_keyframe(plain, tmp_path / DUMP_DIR))
    assert loaded.rgb_only and loaded.depth is None and loaded.normals is None

    dump = load_keyframe_dump(tmp_path / DUMP_DIR)
    assert [kf.frame_id for kf in dump] == [3, 7]
    back = dump[1]
    assert back.timestamp == 1.5
    assert (back.alpha, back.beta) == (2.0, 0.1)
    assert np.allclose(back.pose.matrix(), pose.matrix())
    assert np.array_equal(back.depth.values, depth.values)
    assert np.array_equal(back.normals.values, normals.values)

    with pytest.raises(InvalidArgumentError):
        load_keyframe_dump(tmp_path / "nothing")


# =============================================================================
# RUNNER PIECES
# =============================================================================
def test_refined_trajectory_follows_its_keyframe():
    tracked = [(float(t), se3_exp([0.1 * t, 0, 0, 0, 0, 0])) for t in range(4)]
    tracker_kf = {0.0: tracked[0][1], 2.0: tracked[2][1]}
    correction = se3_exp([0.0, 0.5, 0.0, 0.0, 0.0, 0.1])
    refined_kf = {t: correction @ p for t, p in tracker_kf.items()}
    traj = refined_trajectory(tracked, refined_kf, tracker_kf)
    assert np.array_equal(traj.timestamps, [0.0, 1.0, 2.0, 3.0])
    for (t, pose), out in zip(tracked, traj.poses):
        ref = 0.0 if t < 2 else 2.0
        expected = pose @ tracker_kf[ref].inverse() @ refined_kf[ref]
        assert np.allclose(out.matrix(), expected.matrix())
    assert np.allclose(traj.poses[2].matrix(), refined_kf[2.0].matrix())
    assert len(refined_trajectory(tracked, {}, {})) == 0


class TestChannel:
    def test_fifo_and_high_water(self):
        telemetry = TelemetryWriter()
        channel = Channel("a->b", 3, threading.Event(), telemetry)
        for k in range(3):
            channel.put(k)
        assert [channel.get() for _ in range(3)] == [0, 1, 2]
        assert channel.high_water == 3
        assert telemetry.high_water == {"a->b": 3}

    def test_stop_releases_a_blocked_reader(self):
        stop = threading.Event()
        channel = Channel("a->b", 1, stop)
        stop.set()
        assert channel.get() is runner_module._END
        channel.close()


# =============================================================================
# CONFIG FILES
# =============================================================================
class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = PipelineConfig()
        cfg.loss.depth_sigma = 0.25
        cfg.run.sync = True
        cfg.alignment.strategy = "min-max"
        cfg.tracker.patches_per_frame = 12
        save_config(cfg, tmp_path / "config.env")
        assert load_config(tmp_path / "config.env", environ={}) == cfg

    def test_environment_overrides_the_file(self, tmp_path):
        save_config(PipelineConfig(), tmp_path / "config.env")
        env = {"DENSEVO__LOSS__DEPTH_WEIGHT": "0.5", "DENSEVO__RUN__SYNC": "yes", "UNRELATED": "1"}
        cfg = load_config(tmp_path / "config.env", environ=env)
        assert cfg.loss.depth_weight == 0.5
        assert cfg.run.sync is True

    @pytest.mark.parametrize("env", [
        {"DENSEVO__LOSS__NOPE": "1"},
        {"DENSEVO__NOPE__KEY": "1"},
        {"DENSEVO__RUN__SYNC": "maybe"},
        {"DENSEVO__TRACKER__PATCH_SIZE": "three"},
        {"DENSEVO__TRACKER__PATCH_SIZE": "4"},
        {"DENSEVO__ALIGNMENT__STRATEGY": "median"},
        {"DENSEVO__LOSS__DEPTH_SIGMA": "0"},
    ])
    def test_rejected_values(self, env):
        with pytest.raises(InvalidArgumentError):
            load_config(environ=env)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            load_config(tmp_path / "missing.env", environ={})


# =============================================================================
# EVALUATION ENTRY POINTS
# =============================================================================
def test_trajectory_files_against_themselves(tmp_path, rng):
    poses = [se3_exp(rng.normal(0, 1.0, 6)) for _ in range(8)]
    save_tum(Trajectory(np.arange(8.0), poses), tmp_path / "traj.txt")
    metrics = evaluate_trajectory_files(tmp_path / "traj.txt", tmp_path / "traj.txt")
    assert metrics["ate"] < 1e-6
    assert metrics["scale"] == pytest.approx(1.0)
    assert metrics["poses"] == 8


def test_alignment_benchmark_ranks_strategies():
    rows = alignment_benchmark(trials=4, seed=1, intr=TINY)
    by_name = {row["strategy"]: row for row in rows}
    assert [row["strategy"] for row in rows] == ["ours", "relaxed", "least-squares", "min-max", "none"]
    assert all(row["trials"] == 4 for row in rows)
    assert by_name["ours"]["rmse"] <= by_name["least-squares"]["rmse"] <= by_name["none"]["rmse"]


def test_loss_variants_only_touch_the_loss(small_config):
    cfg = variant_config(small_config, LOSS_VARIANTS["rgb-only"])
    assert cfg.loss.depth_weight == 0.0 and cfg.loss.normal_weight == 0.0
    assert small_config.loss.depth_weight > 0.0
    assert cfg.mapping == small_config.mapping


# =============================================================================
# END TO END
# =============================================================================
@pytest.mark.slow
class TestPipelineRuns:
    def test_sync_run_writes_every_artifact(self, room, fast_config, tmp_path):
        artifacts = run_pipeline(fast_config, room, tmp_path / "run")
        out = artifacts.out_dir
        for name in (TRAJ_TRACKING, TRAJ_REFINED, CHECKPOINT, CONFIG, SUMMARY, "telemetry.jsonl", "intrinsics.txt"):
            assert (out / name).exists()
        assert len(artifacts.tracking) == 6
        assert artifacts.keyframes >= 1
        assert len(load_tum(out / TRAJ_REFINED)) == 6
        assert len(list((out / DUMP_DIR).glob("*.npz"))) == artifacts.keyframes
        summary = json.loads((out / SUMMARY).read_text())
        assert summary["frames"] == 6 and summary["mode"] == "sync"
        stages = {r["stage"] for r in read_telemetry(out / "telemetry.jsonl")}
        assert {"tracking", "enhancement", "pipeline"} <= stages

    def test_sync_runs_are_reproducible(self, room, fast_config, tmp_path):
        a = run_pipeline(fast_config, room, tmp_path / "a")
        b = run_pipeline(fast_config, room, tmp_path / "b")
        for name in (TRAJ_TRACKING, TRAJ_REFINED):
            assert (a.out_dir / name).read_text() == (b.out_dir / name).read_text()
        for key, value in a.mapper.field.params.arrays.items():
            assert np.array_equal(value, b.mapper.field.params.arrays[key])

    def test_tracking_only(self, room, fast_config, tmp_path):
        artifacts = run_pipeline(fast_config, room, tmp_path / "run", mapping=False)
        assert not (artifacts.out_dir / CHECKPOINT).exists()
        assert len(artifacts.refined) == 0
        assert artifacts.steps == 0

    def test_async_run_finishes(self, room, fast_config, tmp_path):
        fast_config.run.sync = False
        fast_config.run.channel_capacity = 1
        artifacts = run_pipeline(fast_config, room, tmp_path / "run")
        assert len(artifacts.tracking) == 6
        assert artifacts.steps >= fast_config.mapping.final_steps
        assert all(v <= 1 for v in artifacts.high_water.values())
        assert len(artifacts.mapper.database) == artifacts.keyframes

    @pytest.mark.parametrize("sync", [True, False])
    def test_stage_failure_keeps_partial_artifacts(self, room, fast_config, tmp_path, monkeypatch, sync):
        def broken_dump(keyframe, directory):
            raise OSError("disk full")

        monkeypatch.setattr(runner_module, "save_keyframe", broken_dump)
        fast_config.run.sync = sync
        with pytest.raises(StageFailure) as excinfo:
            run_pipeline(fast_config, room, tmp_path / "run")
        failure = excinfo.value
        assert failure.stage == "enhancement"
        assert isinstance(failure.cause, OSError)
        assert failure.artifacts.failure is failure
        assert (tmp_path / "run" / TRAJ_TRACKING).exists()
        summary = json.loads((tmp_path / "run" / SUMMARY).read_text())
        assert "disk full" in summary["failure"]

    def test_offline_mapping_from_the_dump(self, room, fast_config, tmp_path):
        artifacts = run_pipeline(fast_config, room, tmp_path / "run", mapping=False)
        keyframes = load_keyframe_dump(artifacts.out_dir / DUMP_DIR)
        mapper = map_keyframes(fast_config, keyframes, room.intrinsics, tmp_path / "remap")
        assert len(mapper.database) == len(keyframes)
        assert (tmp_path / "remap" / CHECKPOINT).exists()
        assert len(load_tum(tmp_path / "remap" / TRAJ_REFINED)) == len(keyframes)


# =============================================================================
# SMALL-BUDGET ACCEPTANCE
# =============================================================================
ACCEPTANCE_INTR = Intrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)


def acceptance_config():
    """Box-room run shrunk to a couple of minutes on a desktop CPU."""
    cfg = PipelineConfig().desk_scale()
    cfg.field.table_log2 = 12
    cfg.mapping.batch_rays = 512
    cfg.mapping.coarse_samples = 16
    cfg.mapping.fine_samples = 16
    cfg.mapping.steps_per_keyframe = 10
    cfg.mapping.final_steps = 600
    cfg.loss.depth_sigma = 0.05
    cfg.tracker.patches_per_frame = 32
    cfg.eval.mesh_resolution = 48
    cfg.eval.mesh_samples = 5000
    cfg.eval.nvs_frames = 10
    lo, hi = box_room().aabb
    cfg.eval.recall_threshold = 0.02 * float(np.linalg.norm(hi - lo))
    cfg.run.sync = True
    return cfg


@pytest.fixture(scope="module")
def ablation_rows(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out, _ = export_dataset(box_room(frames=20), ACCEPTANCE_INTR, root / "room")
    dataset = ingest_dataset(out, "synthetic")
    rows = loss_ablation(acceptance_config(), dataset, root / "runs", variants=["full", "no-depth", "no-normal"])
    return {row["run"]: row for row in rows}


@pytest.mark.slow
def test_box_room_end_to_end(ablation_rows):
    full = ablation_rows["full"]
    assert full["ate_tracking_pct"] < 2.0
    assert full["ate_refined_pct"] < 5.0
    assert not full["mesh_empty"]
    assert full["recall"] > 40.0
    assert full["psnr"] > 18.0


@pytest.mark.slow
def test_dense_priors_help_the_mesh(ablation_rows):
    assert list(ablation_rows) == ["full", "no-depth", "no-normal"]
    full = ablation_rows["full"]
    assert full["recall"] > ablation_rows["no-depth"].get("recall", 0.0)
    # normals shift recall by a few points at most
    assert full["recall"] >= ablation_rows["no-normal"].get("recall", 0.0) - 2.0
