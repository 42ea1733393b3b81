# =============================================================================
# SYNTHETIC SCENES - synth/scene.py
# =============================================================================
# Analytic scenes (spheres, axis-aligned boxes, planes) with procedural
# albedo, camera trajectories and the scene file format.
#
# Scene files use the pipeline config syntax (python-dotenv key-value):
#   SCENE__NAME=box-room
#   SCENE__GLOSSY=false
#   BOX_0__LO=-2,-2,0
#   BOX_0__HI=2,2,3
#   BOX_0__INWARD=true
#   BOX_0__ALBEDO=0.8,0.75,0.7
#   SPHERE_0__CENTER=0.6,0.4,0.8
#   SPHERE_0__RADIUS=0.5
#   TRAJECTORY__KIND=orbit
#   TRAJECTORY__FRAMES=60
# =============================================================================

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from dotenv import dotenv_values

from errors import InvalidArgumentError, ManifestParseError
from geometry.lie import Pose

logger = logging.getLogger(__name__)

TEXTURE_FREQUENCY = 6.0
TEXTURE_CONTRAST = 0.35
WORLD_UP = np.array([0.0, 0.0, 1.0])


# =============================================================================
# PRIMITIVES
# =============================================================================
@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def intersect(self, o, d):
        """Nearest positive hit distance (inf on miss) and outward normals."""
        oc = o - self.center
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        n = (p - self.center) / self.radius
        return t, n

    def contains(self, p):
        return bool(np.linalg.norm(np.asarray(p) - self.center) < self.radius)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray
    inward: bool = False  # rooms are seen from inside

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (self.lo - o) * inv
            tb = (self.hi - o) * inv
        t_min = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
        t_max = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
        near = t_min.max(axis=-1)
        far = t_max.min(axis=-1)
        hit = far >= np.maximum(near, 0.0)
        if self.inward:
            t = np.where(hit & (far > 1e-9), far, np.inf)
            axis = np.argmin(t_max, axis=-1)
        else:
            t = np.where(hit & (near > 1e-9), near, np.inf)
            axis = np.argmax(t_min, axis=-1)
        sign = np.sign(np.take_along_axis(d, axis[..., None], axis=-1)[..., 0])
        n = np.zeros(d.shape)
        # outward normal faces against the ray on entry, along it on exit
        np.put_along_axis(n, axis[..., None], (sign if self.inward else -sign)[..., None], axis=-1)
        if self.inward:
            n = -n
        return t, n

    def contains(self, p):
        p = np.asarray(p)
        return bool(np.all(p > self.lo) and np.all(p < self.hi))


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.normal = self.normal / np.linalg.norm(self.normal)

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
        return t, np.broadcast_to(self.normal, d.shape).copy()

    def contains(self, p):
        return False


# =============================================================================
# SCENE
# =============================================================================
@dataclass
class SceneSpec:
    name: str
    primitives: list
    aabb: tuple
    trajectory: dict = field(default_factory=dict)
    glossy: bool = False
    far: float = 20.0

    def albedo(self, index, points):
        """Textured albedo of primitive `index` at world points (N, 3)."""
        base = np.asarray(self.primitives[index].albedo, dtype=np.float64)
        f = TEXTURE_FREQUENCY
        pattern = np.sin(f * points[:, 0]) * np.sin(f * points[:, 1] + 1.0) * np.sin(f * points[:, 2] + 2.0)
        shade = 1.0 + TEXTURE_CONTRAST * pattern
        return np.clip(base[None, :] * shade[:, None], 0.0, 1.0)

    def inside_geometry(self, p):
        for prim in self.primitives:
            if isinstance(prim, Box) and prim.inward:
                if not prim.contains(p):
                    return True
            elif prim.contains(p):
                return True
        return False


def box_room(glossy=False, frames=60):
    """The standard 4 x 4 x 3 textured room with a sphere and a crate inside."""
    primitives = [
        Box(np.array([-2.0, -2.0, 0.0]), np.array([2.0, 2.0, 3.0]), np.array([0.8, 0.75, 0.7]), inward=True),
        Sphere(np.array([0.6, 0.4, 0.8]), 0.5, np.array([0.85, 0.3, 0.25])),
        Box(np.array([-1.0, -0.8, 0.0]), np.array([-0.3, -0.1, 0.9]), np.array([0.25, 0.45, 0.8])),
    ]
    trajectory = {
        "kind": "orbit",
        "frames": frames,
        "center": (0.0, 0.0, 1.6),
        "radius": 1.3,
        "target": (0.0, 0.0, 0.6),
        "revolutions": 1.0,
    }
    return SceneSpec("box-room", primitives, (np.array([-2.0, -2.0, 0.0]), np.array([2.0, 2.0, 3.0])), trajectory, glossy)


def plane_scene(z=2.0):
    """A single textured plane facing the origin camera."""
    plane = Plane(np.array([0.0, 0.0, z]), np.array([0.0, 0.0, -1.0]), np.array([0.6, 0.6, 0.6]))
    return SceneSpec("plane", [plane], (np.array([-4.0, -4.0, 0.0]), np.array([4.0, 4.0, z + 0.1])))


# =============================================================================
# TRAJECTORIES
# =============================================================================
def look_at(eye, target, up=WORLD_UP):
    """World-to-camera pose looking from eye to target (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.stack([x, y, z], axis=1)
    R = R_wc.T
    return Pose.from_rt(R, -R @ eye)


def orbit(frames, center, radius, target, revolutions=1.0):
    angles = 2.0 * np.pi * revolutions * np.arange(frames) / max(frames, 1)
    center = np.asarray(center, dtype=np.float64)
    eyes = center + radius * np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=1)
    return [look_at(eye, target) for eye in eyes]


def lawnmower(frames, lo, hi, height, target_offset=(0.0, 1.0, -1.0), lanes=3):
    """Back-and-forth sweep over a rectangle at constant height."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    per_lane = max(1, frames // lanes)
    poses = []
    for k in range(frames):
        lane = min(k // per_lane, lanes - 1)
        s = (k % per_lane) / max(per_lane - 1, 1)
        if lane % 2:
            s = 1.0 - s
        y = lo[1] + (hi[1] - lo[1]) * (lane + 0.5) / lanes
        eye = np.array([lo[0] + s * (hi[0] - lo[0]), y, height])
        poses.append(look_at(eye, eye + np.asarray(target_offset)))
    return poses


def scene_trajectory(scene, frames=None):
    """Poses of the scene's declared trajectory; rejects cameras inside geometry."""
    spec = dict(scene.trajectory)
    kind = spec.get("kind", "orbit")
    n = int(frames or spec.get("frames", 60))
    if kind == "orbit":
        poses = orbit(n, spec["center"], spec["radius"], spec["target"], spec.get("revolutions", 1.0))
    elif kind == "lawnmower":
        poses = lawnmower(n, spec["lo"], spec["hi"], spec["height"])
    else:
        raise InvalidArgumentError(f"unknown trajectory kind {kind!r}")
    for k, pose in enumerate(poses):
        if scene.inside_geometry(pose.center):
            raise InvalidArgumentError(f"trajectory pose {k} lies inside scene geometry")
    return poses


# =============================================================================
# SCENE FILES
# =============================================================================
def _vec(raw, key):
    try:
        values = tuple(float(v) for v in raw.split(","))
    except ValueError as exc:
        raise ManifestParseError(f"bad vector for {key}: {raw!r}") from exc
    return values


def _section_order(section):
    match = re.match(r"([A-Z]+)_(\d+)$", section)
    return (match.group(1), int(match.group(2))) if match else (section, 0)


def _flag(raw):
    return raw.strip().lower() in ("1", "true", "yes", "on")


def load_scene(path):
    """Read a scene file into a SceneSpec."""
    if not Path(path).exists():
        raise InvalidArgumentError(f"scene file not found: {path}")
    flat = {k: v for k, v in dotenv_values(path).items() if v is not None}
    groups = {}
    for key, value in flat.items():
        if "__" not in key:
            raise ManifestParseError(f"scene key without section: {key}")
        section, name = key.split("__", 1)
        groups.setdefault(section.upper(), {})[name.lower()] = value

    head = groups.pop("SCENE", {})
    traj_raw = groups.pop("TRAJECTORY", {})
    primitives = []
    for section in sorted(groups, key=_section_order):
        values = groups[section]
        kind = re.sub(r"_\d+$", "", section)
        albedo = np.array(_vec(values.get("albedo", "0.7,0.7,0.7"), f"{section}__ALBEDO"))
        if kind == "SPHERE":
            primitives.append(Sphere(np.array(_vec(values["center"], section)), float(values["radius"]), albedo))
        elif kind == "BOX":
            primitives.append(Box(
                np.array(_vec(values["lo"], section)),
                np.array(_vec(values["hi"], section)),
                albedo,
                inward=_flag(values.get("inward", "false")),
            ))
        elif kind == "PLANE":
            primitives.append(Plane(np.array(_vec(values["point"], section)), np.array(_vec(values["normal"], section)), albedo))
        else:
            raise ManifestParseError(f"unknown scene section {section}")

    trajectory = {}
    for key, raw in traj_raw.items():
        if key == "kind":
            trajectory[key] = raw
        elif key in ("frames", "lanes"):
            trajectory[key] = int(raw)
        elif key in ("radius", "height", "revolutions"):
            trajectory[key] = float(raw)
        else:
            trajectory[key] = _vec(raw, f"TRAJECTORY__{key.upper()}")

    if "aabb_lo" in head:
        aabb = (np.array(_vec(head["aabb_lo"], "SCENE__AABB_LO")), np.array(_vec(head["aabb_hi"], "SCENE__AABB_HI")))
    else:
        aabb = _bounds(primitives)
    return SceneSpec(
        head.get("name", Path(path).stem),
        primitives,
        aabb,
        trajectory,
        glossy=_flag(head.get("glossy", "false")),
        far=float(head.get("far", 20.0)),
    )


def _bounds(primitives):
    lows, highs = [], []
    for prim in primitives:
        if isinstance(prim, Sphere):
            lows.append(prim.center - prim.radius)
            highs.append(prim.center + prim.radius)
        elif isinstance(prim, Box):
            lows.append(prim.lo)
            highs.append(prim.hi)
    if not lows:
        raise InvalidArgumentError("scene needs at least one bounded primitive")
    return np.min(lows, axis=0), np.max(highs, axis=0)


def _fmt(vec):
    return ",".join(repr(float(v)) for v in np.ravel(vec))


def save_scene(scene, path):
    lines = [
        f"# scene {scene.name}",
        f"SCENE__NAME={scene.name}",
        f"SCENE__GLOSSY={'true' if scene.glossy else 'false'}",
        f"SCENE__FAR={scene.far!r}",
        f"SCENE__AABB_LO={_fmt(scene.aabb[0])}",
        f"SCENE__AABB_HI={_fmt(scene.aabb[1])}",
    ]
    counts = {}
    for prim in scene.primitives:
        kind = type(prim).__name__.upper()
        k = counts.get(kind, 0)
        counts[kind] = k + 1
        sec = f"{kind}_{k}"
        if isinstance(prim, Sphere):
            lines += [f"{sec}__CENTER={_fmt(prim.center)}", f"{sec}__RADIUS={float(prim.radius)!r}"]
        elif isinstance(prim, Box):
            lines += [f"{sec}__LO={_fmt(prim.lo)}", f"{sec}__HI={_fmt(prim.hi)}",
                      f"{sec}__INWARD={'true' if prim.inward else 'false'}"]
        else:
            lines += [f"{sec}__POINT={_fmt(prim.point)}", f"{sec}__NORMAL={_fmt(prim.normal)}"]
        lines.append(f"{sec}__ALBEDO={_fmt(prim.albedo)}")
    for key, value in scene.trajectory.items():
        text = value if isinstance(value, str) else (_fmt(value) if np.ndim(value) else repr(value))
        lines.append(f"TRAJECTORY__{key.upper()}={text}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
