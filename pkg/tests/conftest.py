# =============================================================================
# SHARED FIXTURES - tests/conftest.py
# =============================================================================

import numpy as np
import pytest

from config import CameraConfig, PipelineConfig
from geometry.camera import Intrinsics
from geometry.lie import Pose, se3_exp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intr():
    """The 128 x 96 desk camera."""
    return Intrinsics.from_config(CameraConfig())


@pytest.fixture
def vga():
    return Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def small_config():
    """Pipeline config shrunk for unit tests."""
    cfg = PipelineConfig().desk_scale()
    cfg.field.levels = 4
    cfg.field.table_log2 = 10
    cfg.field.density_hidden = 16
    cfg.field.color_hidden = 16
    cfg.mapping.batch_rays = 64
    cfg.mapping.coarse_samples = 8
    cfg.mapping.fine_samples = 8
    cfg.mapping.steps_per_keyframe = 2
    cfg.mapping.final_steps = 4
    cfg.run.sync = True
    return cfg


def random_pose(rng, scale=0.5):
    return se3_exp(rng.normal(0.0, scale, size=6))


@pytest.fixture
def make_pose(rng):
    return lambda scale=0.5: random_pose(rng, scale)


@pytest.fixture
def identity():
    return Pose.identity()
