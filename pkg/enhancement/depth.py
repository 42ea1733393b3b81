# =============================================================================
# DEPTH AND NORMAL RASTERS - enhancement/depth.py
# =============================================================================
# Dense depth / normal maps, the sparse depth set extracted from tracked
# patches, and the binary raster format used to store them.
#
# Binary layout (little-endian):
#   bytes 0-3   magic  b"DVD1" (depth) or b"DVN1" (normals)
#   bytes 4-5   uint16 width
#   bytes 6-7   uint16 height
#   then        float32 values, row-major; normals interleave x, y, z
# Invalid depth pixels are stored as 0.
# =============================================================================

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from errors import CheckpointFormatError, InvalidArgumentError

DEPTH_MAGIC = b"DVD1"
NORMAL_MAGIC = b"DVN1"
HEADER = struct.Struct("<4sHH")


# =============================================================================
# TYPES
# =============================================================================
@dataclass
class DepthMap:
    """H x W depth raster with a validity mask; valid entries are finite and > 0."""

    values: np.ndarray
    mask: np.ndarray | None = None
    clamped: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidArgumentError("depth map must be 2-D")
        finite = np.isfinite(self.values) & (self.values > 0)
        if self.mask is None:
            self.mask = finite
        else:
            self.mask = np.asarray(self.mask, dtype=bool) & finite
        if self.clamped is None:
            self.clamped = np.zeros_like(self.mask)

    @property
    def shape(self):
        return self.values.shape

    @property
    def valid_values(self):
        return self.values[self.mask]


@dataclass
class SparseDepthSet:
    """Pixel coordinates (N, 2) as (u, v) and their depths (N,)."""

    pixels: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.depths = np.asarray(self.depths, dtype=np.float64).ravel()
        if self.pixels.shape[0] != self.depths.size:
            raise InvalidArgumentError("pixels and depths must have the same length")

    def __len__(self):
        return self.depths.size

    def subset(self, mask):
        return SparseDepthSet(self.pixels[mask], self.depths[mask])


@dataclass
class NormalMap:
    """H x W x 3 unit normals in the camera frame."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise InvalidArgumentError("normal map must be H x W x 3")

    @property
    def shape(self):
        return self.values.shape[:2]

    def is_unit(self, atol=1e-6):
        return bool(np.all(np.abs(np.linalg.norm(self.values, axis=2) - 1.0) <= atol))


# =============================================================================
# BINARY I/O
# =============================================================================
def _write_raster(path, magic, width, height, data):
    if width > 0xFFFF or height > 0xFFFF:
        raise InvalidArgumentError("raster too large for a 16-bit header")
    payload = HEADER.pack(magic, width, height) + data.astype("<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(payload)


def _read_raster(path, magic, channels):
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header")
    found, width, height = HEADER.unpack_from(blob)
    if found != magic:
        raise CheckpointFormatError(f"{path}: bad magic {found!r}")
    expected = HEADER.size + 4 * width * height * channels
    if len(blob) != expected:
        raise CheckpointFormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).astype(np.float64)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return data.reshape(shape)


def save_depth(path, depth):
    values = np.where(depth.mask, depth.values, 0.0)
    height, width = values.shape
    _write_raster(path, DEPTH_MAGIC, width, height, values)


def load_depth(path):
    return DepthMap(_read_raster(path, DEPTH_MAGIC, 1))


def save_normals(path, normals):
    height, width = normals.shape
    _write_raster(path, NORMAL_MAGIC, width, height, normals.values)


def load_normals(path):
    return NormalMap(_read_raster(path, NORMAL_MAGIC, 3))
