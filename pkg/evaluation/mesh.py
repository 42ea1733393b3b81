# =============================================================================
# MESH EVALUATION - evaluation/mesh.py
# =============================================================================
# Marching-cubes extraction from a density field, culling of regions no
# keyframe observed, accuracy / completion / recall against a reference mesh
# and PLY I/O.
#
# The default iso level is the density at which one voxel of material has
# opacity 0.5:  1 - exp(-rho * voxel) = 0.5  ->  rho = ln 2 / voxel.
# Recall counts reference samples with distance <= threshold (inclusive).
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import mcubes
import numpy as np
import trimesh
from scipy.spatial import cKDTree

from errors import ContractViolationError, InvalidArgumentError, MetricsUndefinedError
from evaluation.trajectory import umeyama

logger = logging.getLogger(__name__)

GRID_CHUNK = 65536
MIN_SAMPLES = 10_000
ICP_ITERATIONS = 30
ICP_TOLERANCE = 1e-7
OBSERVED_OPACITY = 0.01
VISIBILITY_TOLERANCE = 0.02  # relative depth slack when testing occlusion
AREA_EPS = 1e-14


# =============================================================================
# TYPES
# =============================================================================
@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) scene units
    faces: np.ndarray  # (F, 3) vertex indices
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidArgumentError("face index out of range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise InvalidArgumentError("one color per vertex expected")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def face_areas(self):
        if self.is_empty:
            return np.zeros(0)
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def centroids(self):
        return self.vertices[self.faces].mean(axis=1) if not self.is_empty else np.zeros((0, 3))

    def submesh(self, face_mask):
        """Keep the selected faces and the vertices they reference."""
        faces = self.faces[np.asarray(face_mask, dtype=bool)]
        used, inverse = np.unique(faces.ravel(), return_inverse=True)
        colors = None if self.colors is None else self.colors[used]
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3), colors)

    def cleaned(self):
        """Drop zero-area triangles and unreferenced vertices."""
        if self.is_empty:
            return self
        return self.submesh(self.face_areas() > AREA_EPS)

    def to_trimesh(self):
        colors = None
        if self.colors is not None:
            colors = np.clip(np.round(self.colors * 255), 0, 255).astype(np.uint8)
        return trimesh.Trimesh(self.vertices, self.faces, vertex_colors=colors, process=False)


@dataclass
class MeshMetrics:
    accuracy: float
    completion: float
    recall: float  # percent
    icp_iterations: int = 0

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "completion": self.completion,
            "recall": self.recall,
            "icp_iterations": self.icp_iterations,
        }


# =============================================================================
# EXTRACTION
# =============================================================================
def default_iso_level(lo, hi, resolution):
    voxel = float(np.mean((np.asarray(hi) - np.asarray(lo)) / (resolution - 1)))
    return float(np.log(2.0) / voxel)


def density_grid(density_fn, lo, hi, resolution, chunk=GRID_CHUNK):
    """
    Sample density on a resolution^3 lattice spanning [lo, hi] (axis 0 = x).

    Args:
        density_fn: (N, 3) world positions -> (N,) densities.
    """
    if resolution < 2:
        raise InvalidArgumentError("mesh resolution must be at least 2")
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    points = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    values = np.empty(points.shape[0], dtype=np.float64)
    for start in range(0, points.shape[0], chunk):
        values[start:start + chunk] = density_fn(points[start:start + chunk])
    return values.reshape(resolution, resolution, resolution)


def extract_density_mesh(density_fn, lo, hi, resolution, threshold=None):
    """Marching cubes on an arbitrary density function inside a box."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if threshold is None:
        threshold = default_iso_level(lo, hi, resolution)
    grid = density_grid(density_fn, lo, hi, resolution)
    if not (grid.max() > threshold > grid.min()):
        logger.warning("density never crosses iso level %.4g, mesh is empty", threshold)
        return TriMesh.empty()
    vertices, triangles = mcubes.marching_cubes(grid, threshold)
    vertices = vertices / (resolution - 1.0) * (hi - lo)[None, :] + lo[None, :]
    return TriMesh(vertices, triangles).cleaned()


def observed_faces(mesh, poses, intr, opacity_maps=None, depth_maps=None):
    """
    Faces whose centroid falls inside at least one keyframe frustum.

    Args:
        poses: World-to-camera Poses.
        opacity_maps: Optional (H, W) rendered opacities per pose; the
            centroid must project onto a pixel with opacity above
            OBSERVED_OPACITY.
        depth_maps: Optional (H, W) z-depth per pose; the centroid must not
            lie behind the observed surface.
    """
    centroids = mesh.centroids()
    seen = np.zeros(len(centroids), dtype=bool)
    for k, pose in enumerate(poses):
        todo = np.flatnonzero(~seen)
        if todo.size == 0:
            break
        pc = pose.apply(centroids[todo])
        z = pc[:, 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        u = intr.fx * pc[:, 0] / zs + intr.cx
        v = intr.fy * pc[:, 1] / zs + intr.cy
        ok = front & intr.contains(u, v)
        ui = np.clip(np.round(u).astype(np.int64), 0, intr.width - 1)
        vi = np.clip(np.round(v).astype(np.int64), 0, intr.height - 1)
        if opacity_maps is not None:
            ok &= opacity_maps[k][vi, ui] > OBSERVED_OPACITY
        if depth_maps is not None:
            ok &= z <= depth_maps[k][vi, ui] * (1.0 + VISIBILITY_TOLERANCE)
        seen[todo[ok]] = True
    return seen


def cull_unobserved(mesh, poses, intr, opacity_maps=None, depth_maps=None):
    if mesh.is_empty or not poses:
        return mesh
    keep = observed_faces(mesh, poses, intr, opacity_maps, depth_maps)
    logger.info("culled %d of %d unobserved faces", int((~keep).sum()), len(keep))
    return mesh.submesh(keep)


def extract_mesh(field, resolution=128, threshold=None, poses=None, intr=None, opacity_maps=None):
    """
    Extract the iso surface of a field snapshot.

    Args:
        field: RadianceField (or snapshot) with a scene box.
        resolution: Lattice points per axis.
        threshold: Iso density; defaults to default_iso_level().
        poses, intr, opacity_maps: Keyframe views used to cull unobserved
            triangles; culling is skipped when poses is None.

    Returns:
        TriMesh, possibly empty (check `is_empty`).
    """
    if field.aabb is None:
        raise ContractViolationError("field has no scene box")
    lo, hi = field.aabb
    mesh = extract_density_mesh(field.density, lo, hi, resolution, threshold)
    if poses is not None and intr is not None:
        mesh = cull_unobserved(mesh, list(poses), intr, opacity_maps)
    return mesh


# =============================================================================
# REFERENCE MESHES
# =============================================================================
def scene_mesh(scene, sphere_subdivisions=4):
    """Triangulated ground-truth surface of a synthetic scene."""
    from synth.scene import Box, Plane, Sphere

    parts = []
    lo, hi = (np.asarray(b, dtype=np.float64) for b in scene.aabb)
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            part = trimesh.creation.icosphere(subdivisions=sphere_subdivisions, radius=prim.radius)
            part.apply_translation(prim.center)
        elif isinstance(prim, Box):
            part = trimesh.creation.box(bounds=np.stack([prim.lo, prim.hi]))
        elif isinstance(prim, Plane):
            part = _plane_quad(prim, float(np.linalg.norm(hi - lo)))
        else:
            raise InvalidArgumentError(f"no mesh for primitive {type(prim).__name__}")
        parts.append(part)
    merged = trimesh.util.concatenate(parts)
    return TriMesh(np.asarray(merged.vertices), np.asarray(merged.faces))


def _plane_quad(plane, size):
    n = plane.normal / np.linalg.norm(plane.normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(n, helper)
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    corners = [plane.point + size * (sa * a + sb * b) for sa, sb in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
    return trimesh.Trimesh(np.array(corners), np.array([[0, 1, 2], [0, 2, 3]]), process=False)


# =============================================================================
# METRICS
# =============================================================================
def sample_surface(mesh, count, seed=0):
    """Area-uniform surface samples (count, 3)."""
    if mesh.is_empty:
        raise MetricsUndefinedError("cannot sample an empty mesh")
    points, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), count, seed=seed)
    return np.asarray(points)


def icp_align(source, target, iterations=ICP_ITERATIONS, tolerance=ICP_TOLERANCE):
    """
    Point-to-point rigid ICP of source onto target.

    Returns:
        (aligned source points, iterations run)
    """
    tree = cKDTree(target)
    current = source.copy()
    previous = np.inf
    done = 0
    for done in range(1, iterations + 1):
        dist, idx = tree.query(current)
        sim = umeyama(current, target[idx], with_scale=False)
        current = sim.apply_points(current)
        err = float(np.mean(dist))
        if abs(previous - err) < tolerance:
            break
        previous = err
    return current, done


def mesh_metrics(pred, gt, sample_count=100_000, threshold=0.05, icp=False, seed=0):
    """
    Accuracy (pred -> gt mean distance), completion (gt -> pred mean
    distance) and recall (% of gt samples within threshold).
    """
    if pred.is_empty or gt.is_empty:
        raise MetricsUndefinedError("mesh metrics need two non-empty meshes")
    if sample_count < MIN_SAMPLES:
        raise InvalidArgumentError(f"sample_count must be at least {MIN_SAMPLES}")
    if threshold <= 0:
        raise InvalidArgumentError("recall threshold must be positive")
    p = sample_surface(pred, sample_count, seed)
    g = sample_surface(gt, sample_count, seed + 1)
    iterations = 0
    if icp:
        p, iterations = icp_align(p, g)
    acc, _ = cKDTree(g).query(p)
    comp, _ = cKDTree(p).query(g)
    return MeshMetrics(
        accuracy=float(np.mean(acc)),
        completion=float(np.mean(comp)),
        recall=float(100.0 * np.mean(comp <= threshold)),
        icp_iterations=iterations,
    )


# =============================================================================
# PLY
# =============================================================================
def save_ply(mesh, path):
    """ASCII PLY."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = trimesh.exchange.ply.export_ply(mesh.to_trimesh(), encoding="ascii")
    path.write_bytes(data)


def load_ply(path):
    loaded = trimesh.load(str(path), file_type="ply", process=False, force="mesh")
    colors = None
    visual = getattr(loaded, "visual", None)
    if visual is not None and getattr(visual, "kind", None) == "vertex":
        colors = np.asarray(visual.vertex_colors)[:, :3] / 255.0
    return TriMesh(np.asarray(loaded.vertices), np.asarray(loaded.faces), colors)
