# =============================================================================
# DATASET INGESTION - pipeline/dataset.py
# =============================================================================
# Reads a dataset directory into a DatasetStream.
#
# Formats:
#   tum-rgb     rgb.txt manifest ("timestamp path"), intrinsics.txt sidecar,
#               optional groundtruth.txt (TUM) and depth.txt
#   synthetic   the same files written by synth.export plus scene.env
#
# Missing or undecodable images are skipped with a warning. Manifest lines
# that cannot be parsed raise ManifestParseError naming the line; timestamps
# must be strictly increasing.
# =============================================================================

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import InvalidArgumentError, ManifestParseError
from evaluation.trajectory import load_tum
from geometry.camera import Intrinsics
from pipeline.image_io import load_depth, load_rgb

logger = logging.getLogger(__name__)

FORMATS = ("tum-rgb", "synthetic")
RGB_MANIFEST = "rgb.txt"
DEPTH_MANIFEST = "depth.txt"
INTRINSICS_FILE = "intrinsics.txt"
GROUNDTRUTH_FILE = "groundtruth.txt"
SCENE_FILE = "scene.env"


@dataclass(frozen=True)
class FrameEntry:
    index: int
    timestamp: float
    path: Path
    depth_path: Path | None = None


@dataclass
class DatasetStream:
    root: Path
    format: str
    intrinsics: Intrinsics
    frames: list = field(default_factory=list)
    groundtruth: object = None  # Trajectory or None
    scene: object = None  # SceneSpec for synthetic datasets

    def __len__(self):
        return len(self.frames)

    @property
    def timestamps(self):
        return np.array([f.timestamp for f in self.frames], dtype=np.float64)

    def iter_frames(self, limit=0):
        """
        Yield (FrameEntry, image) in timestamp order; frames whose image
        cannot be decoded are skipped.
        """
        count = 0
        for entry in self.frames:
            if limit and count >= limit:
                return
            try:
                image = load_rgb(entry.path)
            except InvalidArgumentError as exc:
                logger.warning("frame %d skipped: %s", entry.index, exc)
                continue
            count += 1
            yield entry, image

    def __iter__(self):
        return self.iter_frames()

    def gt_depth(self, entry):
        """Ground-truth (depth, valid) for evaluation, or None."""
        if entry.depth_path is None or not entry.depth_path.exists():
            return None
        return load_depth(entry.depth_path)


# =============================================================================
# PARSERS
# =============================================================================
def parse_manifest(path):
    """
    Parse a "timestamp path" manifest.

    Returns:
        list of (line number, timestamp, relative path)
    """
    rows = []
    last = -np.inf
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ManifestParseError(f"{path}: expected 'timestamp path'", line=lineno)
        try:
            stamp = float(parts[0])
        except ValueError as exc:
            raise ManifestParseError(f"{path}: bad timestamp {parts[0]!r}", line=lineno) from exc
        if stamp <= last:
            raise ManifestParseError(f"{path}: timestamps out of order", line=lineno)
        last = stamp
        rows.append((lineno, stamp, parts[1]))
    return rows


def load_intrinsics(path):
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ManifestParseError(f"{path}: expected 'fx fy cx cy width height'", line=lineno)
        try:
            fx, fy, cx, cy = (float(p) for p in parts[:4])
            width, height = int(parts[4]), int(parts[5])
        except ValueError as exc:
            raise ManifestParseError(f"{path}: non-numeric intrinsics", line=lineno) from exc
        values.append(Intrinsics(fx, fy, cx, cy, width, height))
    if not values:
        raise ManifestParseError(f"{path}: no intrinsics line")
    return values[0]


def save_intrinsics(intr, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(
        "# fx fy cx cy width height\n"
        f"{intr.fx:.6f} {intr.fy:.6f} {intr.cx:.6f} {intr.cy:.6f} {intr.width} {intr.height}\n"
    )


def _match_depth(root, stamps):
    """Nearest depth image per frame timestamp (within 20 ms)."""
    path = root / DEPTH_MANIFEST
    if not path.exists():
        return [None] * len(stamps)
    rows = parse_manifest(path)
    if not rows:
        return [None] * len(stamps)
    depth_stamps = np.array([r[1] for r in rows])
    out = []
    for t in stamps:
        k = int(np.argmin(np.abs(depth_stamps - t)))
        out.append(root / rows[k][2] if abs(depth_stamps[k] - t) <= 0.02 else None)
    return out


# =============================================================================
# INGESTION
# =============================================================================
def ingest_dataset(path, fmt="tum-rgb", camera=None):
    """
    Args:
        path: Dataset directory.
        fmt: "tum-rgb" or "synthetic".
        camera: CameraConfig used when the intrinsics sidecar is missing.

    Returns:
        DatasetStream
    """
    root = Path(path)
    if fmt not in FORMATS:
        raise InvalidArgumentError(f"unknown dataset format {fmt!r}")
    if not root.is_dir():
        raise InvalidArgumentError(f"dataset directory not found: {root}")
    manifest = root / RGB_MANIFEST
    if not manifest.exists():
        raise InvalidArgumentError(f"missing manifest {manifest}")

    if (root / INTRINSICS_FILE).exists():
        intr = load_intrinsics(root / INTRINSICS_FILE)
    elif camera is not None:
        logger.warning("no %s in %s, using configured camera", INTRINSICS_FILE, root)
        intr = Intrinsics.from_config(camera)
    else:
        raise InvalidArgumentError(f"missing {INTRINSICS_FILE} in {root}")

    rows = parse_manifest(manifest)
    depth_paths = _match_depth(root, [r[1] for r in rows])
    frames = []
    for k, ((lineno, stamp, rel), depth_path) in enumerate(zip(rows, depth_paths)):
        image_path = root / rel
        if not image_path.exists():
            logger.warning("line %d: image %s missing, frame skipped", lineno, rel)
            continue
        frames.append(FrameEntry(k, stamp, image_path, depth_path))

    gt = load_tum(root / GROUNDTRUTH_FILE) if (root / GROUNDTRUTH_FILE).exists() else None
    scene = None
    if fmt == "synthetic":
        from synth.scene import load_scene

        if not (root / SCENE_FILE).exists():
            raise InvalidArgumentError(f"synthetic dataset without {SCENE_FILE}")
        scene = load_scene(root / SCENE_FILE)

    logger.info("ingested %d frames from %s (%s)", len(frames), root, fmt)
    return DatasetStream(root, fmt, intr, frames, gt, scene)
