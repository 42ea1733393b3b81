# =============================================================================
# RUNS API ROUTES - routes/runs_routes.py
# =============================================================================
# Read-only endpoints over pipeline run directories.
#
# Endpoints:
#   GET /api/runs - List runs and their artifacts
#   GET /api/runs/<run> - Run summary, config and metric records
#   GET /api/runs/<run>/trajectory?kind=tracking|refined - Trajectory as JSON
#   GET /api/runs/<run>/telemetry?limit=n - Last n telemetry records
#   GET /api/runs/<run>/metrics - Evaluation records
#   GET /api/runs/<run>/files/<name> - Download an artifact
# =============================================================================

from flask import Blueprint, jsonify, request, send_file

import runs  # module reference, root is set by init_runs()
from evaluation.report import METRICS_FILE, read_records

runs_bp = Blueprint("runs_api", __name__)


def _run_or_404(name):
    path = runs.get_run(name)
    if path is None:
        return None, (jsonify({"message": f"Run '{name}' not found"}), 404)
    return path, None


# =============================================================================
# LIST RUNS
# =============================================================================
@runs_bp.route("/api/runs", methods=["GET"])
def list_runs():
    """All runs under the served root."""
    if not runs.is_available():
        return jsonify({"message": "Runs directory unavailable"}), 503
    return jsonify(runs.list_runs()), 200


# =============================================================================
# RUN SUMMARY
# =============================================================================
@runs_bp.route("/api/runs/<name>", methods=["GET"])
def get_run(name):
    path, error = _run_or_404(name)
    if error:
        return error
    return jsonify(runs.run_summary(path)), 200


# =============================================================================
# TRAJECTORY
# =============================================================================
@runs_bp.route("/api/runs/<name>/trajectory", methods=["GET"])
def get_trajectory(name):
    """Camera-to-world positions and quaternions of one trajectory file."""
    path, error = _run_or_404(name)
    if error:
        return error
    kind = request.args.get("kind", "tracking")
    if kind not in runs.TRAJECTORY_FILES:
        return jsonify({"message": "kind must be 'tracking' or 'refined'"}), 400
    rows = runs.run_trajectory(path, kind)
    if rows is None:
        return jsonify({"message": f"No {kind} trajectory in run '{name}'"}), 404
    return jsonify({"kind": kind, "poses": rows}), 200


# =============================================================================
# TELEMETRY
# =============================================================================
@runs_bp.route("/api/runs/<name>/telemetry", methods=["GET"])
def get_telemetry(name):
    path, error = _run_or_404(name)
    if error:
        return error
    limit = request.args.get("limit", type=int)
    if limit is not None and limit < 0:
        return jsonify({"message": "limit must be non-negative"}), 400
    records = runs.run_telemetry(path, limit)
    if records is None:
        return jsonify({"message": f"No telemetry in run '{name}'"}), 404
    return jsonify(records), 200


# =============================================================================
# METRICS
# =============================================================================
@runs_bp.route("/api/runs/<name>/metrics", methods=["GET"])
def get_metrics(name):
    path, error = _run_or_404(name)
    if error:
        return error
    return jsonify(read_records(path / METRICS_FILE)), 200


# =============================================================================
# FILE DOWNLOAD
# =============================================================================
@runs_bp.route("/api/runs/<name>/files/<path:filename>", methods=["GET"])
def get_file(name, filename):
    path, error = _run_or_404(name)
    if error:
        return error
    target = runs.run_file(path, filename)
    if target is None:
        return jsonify({"message": f"File '{filename}' not found"}), 404
    return send_file(target, as_attachment=True, download_name=target.name)
