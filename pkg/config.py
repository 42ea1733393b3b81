# =============================================================================
# CONFIGURATION - config.py
# =============================================================================
# All pipeline configuration in one place.
# Defaults live here as module constants; PipelineConfig groups them into
# sections and round-trips through a key-value file read with python-dotenv.
#
# File format (one key per line, nested keys joined by "__"):
#   TRACKER__PATCH_SIZE=3
#   LOSS__DEPTH_WEIGHT=0.001
#
# Usage:
#   from config import PipelineConfig, load_config, save_config
# =============================================================================

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path

from dotenv import dotenv_values

from errors import InvalidArgumentError

ENV_PREFIX = "DENSEVO__"

# =============================================================================
# CAMERA (desk-scale synthetic default: 128x96 pinhole)
# =============================================================================
CAMERA_FX = 110.0
CAMERA_FY = 110.0
CAMERA_CX = 64.0
CAMERA_CY = 48.0
CAMERA_WIDTH = 128
CAMERA_HEIGHT = 96

# =============================================================================
# PATCH TRACKER
# =============================================================================
PATCHES_PER_FRAME = 96  # K square patches sampled per keyframe
PATCH_SIZE = 3  # s, patch side length in pixels
WINDOW_SIZE = 10  # keyframes kept in the sliding optimization window
EDGE_RADIUS = 0  # temporal edge radius in frames, 0 = whole window
FLOW_THRESHOLD = 16.0  # mean patch-center flow (px) that keeps a keyframe
BA_ITERATIONS = 4
BA_DAMPING = 1e-4  # initial Levenberg damping
BA_DAMPING_CAP = 1e4
INVERSE_DEPTH_FLOOR = 1e-4
FROZEN_FRAMES = 1  # gauge: oldest poses of the window held fixed
HUBER_DELTA = 0.0  # pixels; 0 keeps plain weighted least squares

# =============================================================================
# DEPTH ALIGNMENT
# =============================================================================
ALIGNMENT_STRATEGY = "ours"  # ours | relaxed | least-squares | min-max | none
OUTLIER_MAD = 5.0  # sparse samples beyond this many MADs are dropped
ALIGNED_DEPTH_FLOOR = 1e-3

# =============================================================================
# RADIANCE FIELD
# =============================================================================
HASH_LEVELS = 16
HASH_TABLE_LOG2 = 19
HASH_FEATURES = 2
HASH_BASE_RESOLUTION = 16
HASH_GROWTH = 1.447
DENSITY_HIDDEN = 64
GEO_FEATURES = 15
COLOR_HIDDEN = 64
SH_DEGREE = 4  # bands; 4 bands = 16 coefficients
FIELD_DTYPE = "float32"
AABB_MARGIN = 0.1

# =============================================================================
# MAPPING
# =============================================================================
BATCH_RAYS = 4096
COARSE_SAMPLES = 32
FINE_SAMPLES = 32
LR_HASH = 1e-2
LR_DECODER = 1e-3
LR_POSE = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-15
WEIGHT_DECAY_HASH = 0.0
WEIGHT_DECAY_DECODER = 1e-6
RECENT_BOOST = 3.0  # sampling weight of the newest keyframe
RECENT_BOOST_STEPS = 200
STEPS_PER_KEYFRAME = 20
FINAL_STEPS = 2000  # refinement steps after the stream ends
MAX_SKIPPED_STEPS = 10

# =============================================================================
# LOSS WEIGHTS
# =============================================================================
RGB_WEIGHT = 1.0
DEPTH_WEIGHT = 0.001  # depth loss weight in the total loss
NORMAL_WEIGHT = 0.00001  # normal consistency weight in the total loss
REG_WEIGHT = 1.0
DIST_WEIGHT = 0.002  # distortion term inside the regularizer
DEPTH_SIGMA = 0.001  # width of the depth-loss Gaussian window
DEPTH_LOSS_FORM = "termination"  # termination | literal

# =============================================================================
# RUN / EVALUATION
# =============================================================================
CHANNEL_CAPACITY = 4
DEFAULT_SEED = 0
DEFAULT_OUT_DIR = os.path.join("runs", "latest")
RUNS_ROOT = os.getenv("DENSEVO_RUNS_ROOT", "runs")  # directory served by the run API
API_PORT = 5000
MESH_RESOLUTION = 128
MESH_SAMPLES = 100_000
RECALL_THRESHOLD = 0.05  # scene units; "<5cm" for metric scenes
NVS_FRAMES = 125
PSNR_CAP = 100.0

# =============================================================================
# SYNTHETIC ORACLES (noise of the stand-in providers)
# =============================================================================
ORACLE_PIXEL_SIGMA = 0.0  # correspondence noise, pixels
ORACLE_DEPTH_SCALE = 1.0  # a in depth = a * GT + b
ORACLE_DEPTH_SHIFT = 0.0  # b
ORACLE_DEPTH_SIGMA = 0.0  # multiplicative depth noise
ORACLE_NORMAL_SIGMA = 0.0  # normal angular noise, radians


# =============================================================================
# CONFIG SECTIONS
# =============================================================================
@dataclass
class CameraConfig:
    fx: float = CAMERA_FX
    fy: float = CAMERA_FY
    cx: float = CAMERA_CX
    cy: float = CAMERA_CY
    width: int = CAMERA_WIDTH
    height: int = CAMERA_HEIGHT


@dataclass
class TrackerConfig:
    patches_per_frame: int = PATCHES_PER_FRAME
    patch_size: int = PATCH_SIZE
    window_size: int = WINDOW_SIZE
    edge_radius: int = EDGE_RADIUS
    flow_threshold: float = FLOW_THRESHOLD
    ba_iterations: int = BA_ITERATIONS
    damping: float = BA_DAMPING
    damping_cap: float = BA_DAMPING_CAP
    inverse_depth_floor: float = INVERSE_DEPTH_FLOOR
    frozen_frames: int = FROZEN_FRAMES
    huber_delta: float = HUBER_DELTA
    debug_dump: str = ""


@dataclass
class AlignmentConfig:
    strategy: str = ALIGNMENT_STRATEGY
    outlier_mad: float = OUTLIER_MAD
    depth_floor: float = ALIGNED_DEPTH_FLOOR


@dataclass
class FieldConfig:
    levels: int = HASH_LEVELS
    table_log2: int = HASH_TABLE_LOG2
    features: int = HASH_FEATURES
    base_resolution: int = HASH_BASE_RESOLUTION
    growth: float = HASH_GROWTH
    density_hidden: int = DENSITY_HIDDEN
    geo_features: int = GEO_FEATURES
    color_hidden: int = COLOR_HIDDEN
    sh_degree: int = SH_DEGREE
    dtype: str = FIELD_DTYPE
    aabb_margin: float = AABB_MARGIN
    appearance_embedding: bool = False


@dataclass
class MappingConfig:
    batch_rays: int = BATCH_RAYS
    coarse_samples: int = COARSE_SAMPLES
    fine_samples: int = FINE_SAMPLES
    lr_hash: float = LR_HASH
    lr_decoder: float = LR_DECODER
    lr_pose: float = LR_POSE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    weight_decay_hash: float = WEIGHT_DECAY_HASH
    weight_decay_decoder: float = WEIGHT_DECAY_DECODER
    recent_boost: float = RECENT_BOOST
    recent_boost_steps: int = RECENT_BOOST_STEPS
    steps_per_keyframe: int = STEPS_PER_KEYFRAME
    final_steps: int = FINAL_STEPS
    max_skipped_steps: int = MAX_SKIPPED_STEPS
    warmup_keyframes: int = 1
    optimize_poses: bool = True
    workers: int = 1


@dataclass
class LossConfig:
    rgb_weight: float = RGB_WEIGHT
    depth_weight: float = DEPTH_WEIGHT
    normal_weight: float = NORMAL_WEIGHT
    reg_weight: float = REG_WEIGHT
    dist_weight: float = DIST_WEIGHT
    depth_sigma: float = DEPTH_SIGMA
    depth_form: str = DEPTH_LOSS_FORM


@dataclass
class RunConfig:
    channel_capacity: int = CHANNEL_CAPACITY
    seed: int = DEFAULT_SEED
    sync: bool = False
    out_dir: str = DEFAULT_OUT_DIR
    max_frames: int = 0
    keyframe_dump: bool = True


@dataclass
class EvalConfig:
    mesh_resolution: int = MESH_RESOLUTION
    mesh_samples: int = MESH_SAMPLES
    recall_threshold: float = RECALL_THRESHOLD
    icp: bool = False
    nvs_frames: int = NVS_FRAMES
    psnr_cap: float = PSNR_CAP


@dataclass
class OracleConfig:
    pixel_sigma: float = ORACLE_PIXEL_SIGMA
    depth_scale: float = ORACLE_DEPTH_SCALE
    depth_shift: float = ORACLE_DEPTH_SHIFT
    depth_sigma: float = ORACLE_DEPTH_SIGMA
    normal_sigma: float = ORACLE_NORMAL_SIGMA


@dataclass
class PipelineConfig:
    camera: CameraConfig = dc_field(default_factory=CameraConfig)
    tracker: TrackerConfig = dc_field(default_factory=TrackerConfig)
    alignment: AlignmentConfig = dc_field(default_factory=AlignmentConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    mapping: MappingConfig = dc_field(default_factory=MappingConfig)
    loss: LossConfig = dc_field(default_factory=LossConfig)
    run: RunConfig = dc_field(default_factory=RunConfig)
    eval: EvalConfig = dc_field(default_factory=EvalConfig)
    oracle: OracleConfig = dc_field(default_factory=OracleConfig)

    def desk_scale(self):
        """Shrink the field and batch to the sizes used for CPU desk runs."""
        self.field.levels = 8
        self.field.table_log2 = 14
        self.field.density_hidden = 32
        self.field.color_hidden = 32
        self.mapping.batch_rays = 256
        return self


# Comments written next to keys by save_config.
KEY_COMMENTS = {
    "TRACKER__PATCHES_PER_FRAME": "K patches sampled per keyframe",
    "TRACKER__PATCH_SIZE": "s, patch side in pixels",
    "TRACKER__FLOW_THRESHOLD": "mean flow (px) needed to keep the fourth-newest keyframe",
    "LOSS__RGB_WEIGHT": "photometric term of the total loss",
    "LOSS__DEPTH_WEIGHT": "uncertainty-aware depth term of the total loss",
    "LOSS__NORMAL_WEIGHT": "normal consistency term of the total loss",
    "LOSS__REG_WEIGHT": "regularizer (proposal + distortion) in the total loss",
    "LOSS__DIST_WEIGHT": "distortion weight inside the regularizer",
    "LOSS__DEPTH_SIGMA": "depth uncertainty of the aligned dense depth",
    "ALIGNMENT__STRATEGY": "ours | relaxed | least-squares | min-max | none",
}


# =============================================================================
# SERIALIZATION
# =============================================================================
def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_value(raw, default, key):
    """Coerce a raw string to the type of the field's default value."""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise InvalidArgumentError(f"bad value for {key}: {raw!r}") from exc
    return raw


def section_to_flat(section):
    """Flatten one config section into KEY -> string pairs."""
    return {
        item.name.upper(): _format_value(getattr(section, item.name))
        for item in dataclasses.fields(section)
    }


def apply_section(section, flat, source="config"):
    """Apply KEY -> string pairs onto one config section in place."""
    for key, raw in flat.items():
        if raw is None:
            continue
        name = key.lower()
        if name not in {item.name for item in dataclasses.fields(section)}:
            raise InvalidArgumentError(f"unknown {source} key: {key}")
        setattr(section, name, _parse_value(raw, getattr(section, name), key))
    return section


def config_to_flat(cfg):
    """Flatten a config tree into SECTION__KEY -> string pairs."""
    flat = {}
    for section in dataclasses.fields(cfg):
        for key, value in section_to_flat(getattr(cfg, section.name)).items():
            flat[f"{section.name.upper()}__{key}"] = value
    return flat


def apply_flat(cfg, flat, source="config"):
    """Apply SECTION__KEY -> string pairs onto a config tree in place."""
    sections = {s.name: getattr(cfg, s.name) for s in dataclasses.fields(cfg)}
    for key, raw in flat.items():
        parts = key.lower().split("__")
        if len(parts) != 2 or parts[0] not in sections:
            raise InvalidArgumentError(f"unknown {source} key: {key}")
        apply_section(sections[parts[0]], {parts[1]: raw}, source)
    return cfg


def load_config(path=None, environ=None):
    """
    Build a PipelineConfig from defaults, an optional file and the environment.

    Args:
        path: Key-value config file (dotenv syntax) or None for defaults.
        environ: Mapping checked for DENSEVO__SECTION__KEY overrides
            (default: os.environ).

    Returns:
        PipelineConfig
    """
    cfg = PipelineConfig()
    if path is not None:
        if not Path(path).exists():
            raise InvalidArgumentError(f"config file not found: {path}")
        apply_flat(cfg, dotenv_values(path), source=str(path))

    environ = os.environ if environ is None else environ
    overrides = {
        key[len(ENV_PREFIX):]: value
        for key, value in environ.items()
        if key.startswith(ENV_PREFIX)
    }
    apply_flat(cfg, overrides, source="environment")
    validate_config(cfg)
    return cfg


def save_config(cfg, path):
    """Write a config tree in the key-value format read by load_config."""
    lines = ["# DenseVO pipeline configuration"]
    current = None
    for key, value in config_to_flat(cfg).items():
        section = key.split("__")[0]
        if section != current:
            lines.append("")
            lines.append(f"# --- {section.lower()} ---")
            current = section
        if key in KEY_COMMENTS:
            lines.append(f"# {KEY_COMMENTS[key]}")
        lines.append(f"{key}={value}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def config_hash(section):
    """Stable SHA-256 digest of one config section (used by checkpoints)."""
    text = ";".join(
        f"{item.name}={_format_value(getattr(section, item.name))}"
        for item in dataclasses.fields(section)
    )
    return hashlib.sha256(text.encode("utf-8")).digest()


# =============================================================================
# VALIDATION
# =============================================================================
STRATEGIES = ("ours", "relaxed", "least-squares", "min-max", "none")


def validate_config(cfg):
    """Reject configurations the pipeline cannot run."""
    if cfg.camera.fx <= 0 or cfg.camera.fy <= 0:
        raise InvalidArgumentError("focal lengths must be positive")
    if cfg.tracker.patch_size < 1 or cfg.tracker.patch_size % 2 == 0:
        raise InvalidArgumentError("patch size must be a positive odd number")
    if cfg.tracker.window_size < 4:
        raise InvalidArgumentError("window must hold at least 4 keyframes")
    if cfg.tracker.frozen_frames < 1:
        raise InvalidArgumentError("at least one frame must be frozen")
    if cfg.alignment.strategy not in STRATEGIES:
        raise InvalidArgumentError(f"unknown alignment strategy {cfg.alignment.strategy!r}")
    if cfg.loss.depth_sigma <= 0:
        raise InvalidArgumentError("depth sigma must be positive")
    if cfg.loss.depth_form not in ("termination", "literal"):
        raise InvalidArgumentError(f"unknown depth loss form {cfg.loss.depth_form!r}")
    if cfg.field.dtype not in ("float32", "float64"):
        raise InvalidArgumentError("field dtype must be float32 or float64")
    if cfg.run.channel_capacity < 1:
        raise InvalidArgumentError("channel capacity must be at least 1")
    if min(cfg.oracle.pixel_sigma, cfg.oracle.depth_sigma, cfg.oracle.normal_sigma) < 0:
        raise InvalidArgumentError("oracle noise levels must be non-negative")
    if cfg.oracle.depth_scale <= 0:
        raise InvalidArgumentError("oracle depth scale must be positive")
    return cfg
