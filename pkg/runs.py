# =============================================================================
# RUN STORE - runs.py
# =============================================================================
# Read-only registry of pipeline run directories under one root.
# Call init_runs() once when the app starts.
#
# A run is any sub-directory holding at least one known artifact.
#
# Usage:
#   import runs
#   runs.init_runs("runs")
#   runs.list_runs()
# =============================================================================

from __future__ import annotations

import json
import logging
from pathlib import Path

from werkzeug.security import safe_join
from werkzeug.utils import secure_filename

from evaluation.report import METRICS_FILE, read_records
from evaluation.trajectory import load_tum
from pipeline.runner import CHECKPOINT, CONFIG, SUMMARY, TELEMETRY, TRAJ_REFINED, TRAJ_TRACKING
from telemetry import read_telemetry

logger = logging.getLogger(__name__)

# =============================================================================
# STATE
# =============================================================================
root = None

ARTIFACTS = (TRAJ_TRACKING, TRAJ_REFINED, CHECKPOINT, TELEMETRY, CONFIG, SUMMARY, METRICS_FILE, "mesh.ply")
TRAJECTORY_FILES = {"tracking": TRAJ_TRACKING, "refined": TRAJ_REFINED}


# =============================================================================
# INITIALIZATION
# =============================================================================
def init_runs(path):
    """
    Point the store at a runs root.

    Returns:
        True if the directory exists.
    """
    global root
    root = Path(path)
    if not root.is_dir():
        logger.warning("runs root %s does not exist yet", root)
        return False
    logger.info("serving runs from %s", root)
    return True


def is_available():
    return root is not None and root.is_dir()


# =============================================================================
# LOOKUPS
# =============================================================================
def _is_run(path):
    return path.is_dir() and any((path / name).exists() for name in ARTIFACTS)


def list_runs():
    """Runs with their available artifacts, sorted by name."""
    if not is_available():
        return []
    out = []
    for path in sorted(p for p in root.iterdir() if _is_run(p)):
        out.append({"name": path.name, "artifacts": [n for n in ARTIFACTS if (path / n).exists()]})
    return out


def get_run(name):
    """Run directory or None; names are sanitized before lookup."""
    if not is_available():
        return None
    safe = secure_filename(name)
    if not safe or safe != name:
        return None
    path = root / safe
    return path if _is_run(path) else None


def run_summary(path):
    summary = {}
    if (path / SUMMARY).exists():
        summary = json.loads((path / SUMMARY).read_text())
    config = {}
    if (path / CONFIG).exists():
        from dotenv import dotenv_values

        config = dict(dotenv_values(path / CONFIG))
    records = read_records(path / METRICS_FILE)
    return {"name": path.name, "summary": summary, "config": config, "metrics": records}


def run_trajectory(path, kind):
    """
    Returns:
        list of {"timestamp", "position", "quaternion"} (camera-to-world),
        or None when the file is missing
    """
    name = TRAJECTORY_FILES.get(kind)
    if name is None or not (path / name).exists():
        return None
    traj = load_tum(path / name)
    rows = []
    for t, pose in zip(traj.timestamps, traj.poses):
        c2w = pose.inverse()
        rows.append({
            "timestamp": float(t),
            "position": [float(v) for v in c2w.translation],
            "quaternion": [float(v) for v in c2w.rotation],
        })
    return rows


def run_telemetry(path, limit=None):
    if not (path / TELEMETRY).exists():
        return None
    return read_telemetry(path / TELEMETRY, limit)


def run_file(path, name):
    """Absolute path of an artifact inside the run, or None."""
    joined = safe_join(str(path), name)
    if joined is None or not Path(joined).is_file():
        return None
    return Path(joined)
