# =============================================================================
# EVALUATION TESTS - tests/test_evaluation.py
# =============================================================================

import logging

import numpy as np
import pytest
import trimesh

from config import PSNR_CAP, FieldConfig
from errors import (
    AlignmentFailureError,
    ContractViolationError,
    InsufficientDataError,
    InvalidArgumentError,
    ManifestParseError,
    MetricsUndefinedError,
)
from evaluation.image import image_metrics, mse_to_psnr, psnr, ssim
from evaluation.mesh import (
    TriMesh,
    default_iso_level,
    extract_density_mesh,
    extract_mesh,
    load_ply,
    mesh_metrics,
    observed_faces,
    save_ply,
    scene_mesh,
)
from evaluation.novel_view import equally_spaced, evaluate_views, evaluation_poses
from evaluation.report import aggregate_seeds, flatten_metrics, read_records, summary_table, write_records
from evaluation.trajectory import (
    Similarity,
    Trajectory,
    associate,
    ate_rmse,
    load_tum,
    save_tum,
    trajectory_diameter,
    umeyama,
    umeyama_align,
)
from field.model import RadianceField
from geometry.lie import Pose, se3_exp
from synth.scene import box_room


def random_trajectory(rng, n=20, spread=1.0):
    poses = [se3_exp(np.concatenate([rng.normal(0, spread, 3), rng.normal(0, 0.3, 3)])) for _ in range(n)]
    return Trajectory(np.arange(n) * 0.1, poses)


def box_mesh(offset=(0.0, 0.0, 0.0)):
    box = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
    box.apply_translation(offset)
    return TriMesh(np.asarray(box.vertices), np.asarray(box.faces))


# =============================================================================
# TRAJECTORIES
# =============================================================================
class TestAlignment:
    def setup_method(self):
        self.rng = np.random.default_rng(8)
        self.gt = random_trajectory(self.rng)
        rotation = se3_exp([0.0, 0.0, 0.0, 0.3, -0.5, 0.9]).rotation_matrix()
        self.true = Similarity(2.5, rotation, np.array([1.0, -2.0, 0.5]))

    def estimate(self):
        inv = self.true.inverse()
        return Trajectory(self.gt.timestamps, [inv.apply_pose(p) for p in self.gt.poses])

    def test_recovers_an_exact_similarity(self):
        sim, aligned = umeyama_align(self.estimate(), self.gt)
        assert sim.scale == pytest.approx(2.5, rel=1e-9)
        assert np.allclose(sim.rotation, self.true.rotation, atol=1e-9)
        assert np.allclose(sim.translation, self.true.translation, atol=1e-9)
        assert ate_rmse(aligned, self.gt) < 1e-9
        for a, b in zip(aligned.poses, self.gt.poses):
            assert np.allclose(a.matrix(), b.matrix(), atol=1e-8)

    def test_rigid_alignment_keeps_unit_scale(self):
        sim, aligned = umeyama_align(self.estimate(), self.gt, with_scale=False)
        assert sim.scale == 1.0
        assert ate_rmse(aligned, self.gt) > 0.1

    def test_rotation_is_proper(self):
        points = self.rng.normal(size=(30, 3))
        mirrored = points * np.array([1.0, 1.0, -1.0])
        sim = umeyama(points, mirrored)
        assert np.linalg.det(sim.rotation) == pytest.approx(1.0)

    def test_degenerate_inputs(self):
        with pytest.raises(AlignmentFailureError):
            umeyama(np.zeros((2, 3)), np.zeros((2, 3)))
        line = np.outer(np.arange(10.0), [1.0, 2.0, 3.0])
        with pytest.raises(AlignmentFailureError):
            umeyama(line, line)

    def test_similarity_inverse(self):
        points = self.rng.normal(size=(5, 3))
        back = self.true.inverse().apply_points(self.true.apply_points(points))
        assert np.allclose(back, points)


def test_ate_of_a_constant_offset(rng):
    gt = random_trajectory(rng, 10)
    shift = Similarity(1.0, np.eye(3), np.array([0.3, 0.0, 0.4]))
    est = Trajectory(gt.timestamps, [shift.apply_pose(p) for p in gt.poses])
    assert ate_rmse(est, gt) == pytest.approx(0.5)
    assert ate_rmse(gt, gt) == 0.0


def test_association_tolerance(rng):
    gt = random_trajectory(rng, 10)
    near = Trajectory(gt.timestamps + 0.01, gt.poses)
    far = Trajectory(gt.timestamps + 0.05, gt.poses)
    ie, ig = associate(near, gt)
    assert np.array_equal(ie, np.arange(10))
    assert np.array_equal(ig, np.arange(10))
    assert associate(far, gt)[0].size == 0
    with pytest.raises(MetricsUndefinedError):
        ate_rmse(far, gt)
    with pytest.raises(AlignmentFailureError):
        umeyama_align(far, gt)


def test_trajectory_invariants(identity):
    with pytest.raises(InvalidArgumentError):
        Trajectory([0.0, 0.0], [identity, identity])
    with pytest.raises(InvalidArgumentError):
        Trajectory([0.0, 1.0], [identity])
    traj = Trajectory.from_dict({2.0: identity, 1.0: identity})
    assert np.array_equal(traj.timestamps, [1.0, 2.0])
    assert trajectory_diameter(Trajectory([0.0], [identity])) == 0.0


def test_diameter(identity):
    far = Pose.from_rt(np.eye(3), [3.0, 4.0, 0.0]).inverse()
    assert trajectory_diameter(Trajectory([0.0, 1.0], [identity, far])) == pytest.approx(5.0)


class TestTumFiles:
    def test_round_trip(self, tmp_path, rng):
        traj = random_trajectory(rng, 6)
        save_tum(traj, tmp_path / "traj.txt", header="estimate")
        loaded = load_tum(tmp_path / "traj.txt")
        assert np.allclose(loaded.timestamps, traj.timestamps)
        for a, b in zip(loaded.poses, traj.poses):
            assert np.allclose(a.matrix(), b.matrix(), atol=1e-7)

    def test_file_holds_camera_centers(self, tmp_path, rng):
        traj = random_trajectory(rng, 3)
        save_tum(traj, tmp_path / "traj.txt")
        rows = np.loadtxt(tmp_path / "traj.txt")
        assert np.allclose(rows[:, 1:4], traj.positions(), atol=1e-8)

    def test_parse_errors_carry_the_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("# header\n0.0 0 0 0 0 0 0 1\n1.0 0 0 0 0 0 1\n")
        with pytest.raises(ManifestParseError) as excinfo:
            load_tum(path)
        assert excinfo.value.line == 3
        path.write_text("0.0 0 0 zero 0 0 0 1\n")
        with pytest.raises(ManifestParseError):
            load_tum(path)


# =============================================================================
# IMAGE METRICS
# =============================================================================
def brute_force_ssim(x, y, sigma=1.5, radius=5):
    k = np.arange(-radius, radius + 1)
    g = np.exp(-k**2 / (2 * sigma**2))
    w = np.outer(g, g) / g.sum() ** 2

    def blur(img):
        padded = np.pad(img, radius, mode="symmetric")
        out = np.empty_like(img)
        for i in range(img.shape[0]):
            for j in range(img.shape[1]):
                out[i, j] = np.sum(w * padded[i:i + 2 * radius + 1, j:j + 2 * radius + 1])
        return out

    c1, c2 = 0.01**2, 0.03**2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    return np.mean((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


class TestImageMetrics:
    def test_psnr_of_a_known_error(self):
        ref = np.zeros((8, 8, 3))
        assert psnr(ref + 0.1, ref) == pytest.approx(20.0)

    def test_identical_images(self, rng):
        img = rng.uniform(size=(16, 16, 3))
        metrics = image_metrics(img, img)
        assert metrics.psnr == PSNR_CAP
        assert metrics.ssim == pytest.approx(1.0)
        assert mse_to_psnr(0.0) == PSNR_CAP
        assert mse_to_psnr(1e-30) == PSNR_CAP

    def test_ssim_matches_explicit_window(self, rng):
        x = rng.uniform(size=(12, 14))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(brute_force_ssim(x, y), abs=1e-10)

    def test_ssim_averages_channels(self, rng):
        x = rng.uniform(size=(10, 10, 3))
        y = rng.uniform(size=(10, 10, 3))
        per_channel = [ssim(x[..., c], y[..., c]) for c in range(3)]
        assert ssim(x, y) == pytest.approx(np.mean(per_channel))
        assert ssim(x, y) < 0.5

    def test_shape_checks(self):
        with pytest.raises(InvalidArgumentError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(InvalidArgumentError):
            ssim(np.zeros(4), np.zeros(4))


# =============================================================================
# MESHES
# =============================================================================
def sphere_density(points):
    return 50.0 * (0.5 - np.linalg.norm(points, axis=1)) + 25.0


class TestExtraction:
    def test_sphere_iso_surface(self):
        mesh = extract_density_mesh(sphere_density, [-1, -1, -1], [1, 1, 1], 32, threshold=25.0)
        assert not mesh.is_empty
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert np.allclose(radii, 0.5, atol=5e-3)
        assert mesh.face_areas().sum() == pytest.approx(np.pi, rel=0.05)

    def test_default_iso_level(self):
        assert default_iso_level([0, 0, 0], [1, 1, 1], 11) == pytest.approx(10 * np.log(2.0))

    def test_constant_density_gives_an_empty_mesh(self, caplog):
        with caplog.at_level(logging.WARNING):
            mesh = extract_density_mesh(lambda x: np.ones(len(x)), [-1, -1, -1], [1, 1, 1], 8, threshold=2.0)
        assert mesh.is_empty
        assert "never crosses" in caplog.text

    def test_resolution_must_be_two(self):
        with pytest.raises(InvalidArgumentError):
            extract_density_mesh(sphere_density, [-1, -1, -1], [1, 1, 1], 1)

    def test_field_needs_a_scene_box(self):
        config = FieldConfig(
            levels=2, table_log2=6, features=2, base_resolution=2, growth=1.5,
            density_hidden=8, geo_features=4, color_hidden=8, sh_degree=2,
        )
        with pytest.raises(ContractViolationError):
            extract_mesh(RadianceField(config), 8)

    def test_scene_mesh(self):
        mesh = scene_mesh(box_room())
        assert not mesh.is_empty
        assert np.all(mesh.face_areas() > 0)


class TestTriMesh:
    def test_face_index_checked(self):
        with pytest.raises(InvalidArgumentError):
            TriMesh(np.zeros((3, 3)), [[0, 1, 3]])
        with pytest.raises(InvalidArgumentError):
            TriMesh(np.zeros((3, 3)), [[0, 1, 2]], colors=np.zeros((2, 3)))

    def test_cleaned_drops_degenerate_faces(self):
        vertices = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
        mesh = TriMesh(vertices, [[0, 1, 2], [0, 1, 3]]).cleaned()
        assert len(mesh.faces) == 1
        assert len(mesh.vertices) == 3


class TestVisibility:
    def setup_method(self):
        front = [[-0.05, -0.05, 2.0], [0.05, -0.05, 2.0], [0.0, 0.05, 2.0]]
        behind = [[-0.05, -0.05, -2.0], [0.05, -0.05, -2.0], [0.0, 0.05, -2.0]]
        self.mesh = TriMesh(np.array(front + behind), [[0, 1, 2], [3, 4, 5]])

    def test_frustum(self, intr, identity):
        assert observed_faces(self.mesh, [identity], intr).tolist() == [True, False]

    def test_occlusion_and_opacity(self, intr, identity):
        shape = (intr.height, intr.width)
        near_wall = [np.ones(shape)]
        assert not observed_faces(self.mesh, [identity], intr, depth_maps=near_wall).any()
        far_wall = [np.full(shape, 5.0)]
        assert observed_faces(self.mesh, [identity], intr, depth_maps=far_wall)[0]
        transparent = [np.zeros(shape)]
        assert not observed_faces(self.mesh, [identity], intr, opacity_maps=transparent).any()


class TestMeshMetrics:
    def test_identical_meshes(self):
        metrics = mesh_metrics(box_mesh(), box_mesh(), sample_count=10_000)
        assert metrics.accuracy < 0.03
        assert metrics.completion < 0.03
        assert metrics.recall > 99.0
        assert metrics.icp_iterations == 0

    def test_icp_removes_an_offset(self):
        plain = mesh_metrics(box_mesh((0.2, 0.0, 0.0)), box_mesh(), sample_count=10_000)
        aligned = mesh_metrics(box_mesh((0.2, 0.0, 0.0)), box_mesh(), sample_count=10_000, icp=True)
        assert plain.accuracy > 0.05
        assert aligned.accuracy < plain.accuracy / 2
        assert aligned.icp_iterations > 0

    def test_recall_threshold_is_inclusive(self):
        tight = mesh_metrics(box_mesh(), box_mesh(), sample_count=10_000, threshold=1e-9)
        loose = mesh_metrics(box_mesh(), box_mesh(), sample_count=10_000, threshold=10.0)
        assert tight.recall < 1.0
        assert loose.recall == 100.0

    def test_preconditions(self):
        with pytest.raises(InvalidArgumentError):
            mesh_metrics(box_mesh(), box_mesh(), sample_count=9_999)
        with pytest.raises(InvalidArgumentError):
            mesh_metrics(box_mesh(), box_mesh(), sample_count=10_000, threshold=0.0)
        with pytest.raises(MetricsUndefinedError):
            mesh_metrics(TriMesh.empty(), box_mesh(), sample_count=10_000)


def test_ply_round_trip(tmp_path):
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
    colors = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255], [51, 102, 153]]) / 255.0
    save_ply(TriMesh(vertices, faces, colors), tmp_path / "mesh.ply")
    loaded = load_ply(tmp_path / "mesh.ply")
    assert np.allclose(loaded.vertices, vertices, atol=1e-6)
    assert np.array_equal(loaded.faces, faces)
    assert np.allclose(loaded.colors, colors, atol=1e-6)

    save_ply(TriMesh(vertices, faces), tmp_path / "plain.ply")
    assert load_ply(tmp_path / "plain.ply").colors is None


# =============================================================================
# REPORTS
# =============================================================================
class TestReports:
    def test_records_append(self, tmp_path):
        path = tmp_path / "runs" / "metrics.jsonl"
        assert read_records(path) == []
        write_records([{"run": "a", "ate": np.float64(0.5)}], path)
        write_records([{"run": "b", "ate": 0.25}, {"run": "c"}], path)
        records = read_records(path)
        assert [r["run"] for r in records] == ["a", "b", "c"]
        assert records[0]["ate"] == 0.5

    def test_flatten(self):
        row = flatten_metrics({"mesh": {"accuracy": 0.1, "note": "x"}, "ate_tracking": 0.2, "name": "run"})
        assert row == {"accuracy": 0.1, "ate_tracking": 0.2}

    def test_summary_table(self):
        rows = [{"run": "a", "extra": 2, "ate_tracking": 0.1}, {"run": "bb", "psnr": 30.0}]
        lines = summary_table(rows).splitlines()
        assert lines[0].split() == ["run", "ate_tracking", "psnr", "extra"]
        assert lines[2].split() == ["a", "0.1000", "-", "2"]
        assert lines[3].split() == ["bb", "-", "30.0000", "-"]

    def test_summary_table_columns_and_label(self):
        text = summary_table([{"strategy": "none", "rmse": float("nan")}], ["rmse"], label="strategy")
        assert text.splitlines()[2].split() == ["none", "-"]

    def test_aggregate_seeds(self):
        stats = aggregate_seeds([{"ate": 1.0, "tag": "x"}, {"ate": 3.0}, {"ate": float("nan")}])
        assert stats == {"ate": {"mean": 2.0, "std": 1.0, "runs": 2}}


# =============================================================================
# NOVEL VIEWS
# =============================================================================
def test_equally_spaced():
    assert equally_spaced(10, 3).tolist() == [0, 4, 9]
    assert equally_spaced(5, 10).tolist() == [0, 1, 2, 3, 4]
    assert equally_spaced(0, 3).size == 0
    assert equally_spaced(100, 125).size == 100


def test_evaluation_poses_of_the_same_trajectory(rng):
    gt = random_trajectory(rng, 12)
    index, poses = evaluation_poses(gt, gt, 4)
    assert index.tolist() == [0, 4, 7, 11]
    for i, pose in zip(index, poses):
        assert np.allclose(pose.matrix(), gt.poses[i].matrix(), atol=1e-8)


def test_no_views_to_evaluate(intr):
    with pytest.raises(InsufficientDataError):
        evaluate_views(None, intr, [], [], 8, 8)
