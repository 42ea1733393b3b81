# =============================================================================
# FIELD CHECKPOINTS - field/checkpoint.py
# =============================================================================
# Versioned binary blob holding the field parameters, the scene box and
# (optionally) the refined keyframe poses.
#
# Layout (little-endian):
#   magic   b"DVCK"
#   uint16  format version
#   32 B    SHA-256 of the field configuration
#   uint32  section count
#   per section:
#     uint16 name length, utf-8 name
#     uint8  dtype code (0 float32, 1 float64, 2 int64, 3 uint8)
#     uint8  ndim, then ndim x uint32 shape
#     uint64 payload bytes, then the raw array
#
# Sections: "param.<name>" for every FieldParams array, "scene.aabb",
# "config.field" (the field section as KEY=value text), and optionally
# "poses.ids" / "poses.values" (N x 7, quaternion xyzw then translation).
# =============================================================================

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from config import FieldConfig, apply_section, config_hash, section_to_flat
from errors import CheckpointFormatError
from field.params import FieldParams
from geometry.lie import Pose

logger = logging.getLogger(__name__)

MAGIC = b"DVCK"
VERSION = 1
HEADER = struct.Struct("<4sH32sI")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
KINDS = {("f", 4): 0, ("f", 8): 1, ("i", 8): 2, ("u", 1): 3}


# =============================================================================
# WRITE
# =============================================================================
def _pack(name, array):
    array = np.ascontiguousarray(array)
    code = KINDS.get((array.dtype.kind, array.dtype.itemsize))
    if code is None:
        raise CheckpointFormatError(f"unsupported dtype {array.dtype} for section {name}")
    raw = array.astype(DTYPES[code]).tobytes()
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BB", code, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    head += struct.pack("<Q", len(raw))
    return head + raw


def save_checkpoint(path, field, poses=None):
    """
    Write a field checkpoint.

    Args:
        path: Output file.
        field: RadianceField (live or snapshot) with its scene box set.
        poses: Optional mapping frame id -> Pose.
    """
    sections = [(f"param.{name}", array) for name, array in field.params.arrays.items()]
    lo, hi = field.aabb
    sections.append(("scene.aabb", np.stack([lo, hi]).astype(np.float64)))
    text = "\n".join(f"{k}={v}" for k, v in section_to_flat(field.cfg).items())
    sections.append(("config.field", np.frombuffer(text.encode("utf-8"), dtype=np.uint8)))
    if poses:
        ids = np.array(sorted(poses), dtype=np.int64)
        values = np.stack([np.concatenate([poses[i].rotation, poses[i].translation]) for i in ids])
        sections.append(("poses.ids", ids))
        sections.append(("poses.values", values))

    blob = bytearray(HEADER.pack(MAGIC, VERSION, config_hash(field.cfg), len(sections)))
    for name, array in sections:
        blob += _pack(name, array)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(blob))
    logger.info("checkpoint written to %s (%d sections)", path, len(sections))


# =============================================================================
# READ
# =============================================================================
def read_sections(path):
    """Parse a checkpoint into (config digest, {name: array})."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header")
    magic, version, digest, count = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    pos = HEADER.size
    sections = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (size,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            if code not in DTYPES or pos + size > len(blob):
                raise CheckpointFormatError(f"{path}: corrupt section {name!r}")
            dtype = DTYPES[code]
            array = np.frombuffer(blob, dtype=dtype, count=size // dtype.itemsize, offset=pos)
            sections[name] = array.reshape(shape).astype(dtype.newbyteorder("="))
            pos += size
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt section table") from exc
    if pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return digest, sections


def load_checkpoint(path, config=None):
    """
    Rebuild a RadianceField from a checkpoint.

    Args:
        path: Checkpoint file.
        config: FieldConfig the checkpoint must match; None uses the
            configuration stored in the file.

    Returns:
        (RadianceField, {frame_id: Pose})
    """
    from field.model import RadianceField

    digest, sections = read_sections(path)
    if config is None:
        text = sections.get("config.field", np.zeros(0, dtype=np.uint8)).tobytes().decode("utf-8")
        flat = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        config = apply_section(FieldConfig(), flat, source=str(path))
    if config_hash(config) != digest:
        raise CheckpointFormatError(f"{path}: field configuration does not match the checkpoint")

    arrays, groups = {}, {}
    for name, array in sections.items():
        if name.startswith("param."):
            key = name[len("param."):]
            arrays[key] = array
            groups[key] = "hash" if key == "hash.table" else "decoder"
    if "scene.aabb" not in sections or "hash.table" not in arrays:
        raise CheckpointFormatError(f"{path}: missing field sections")
    aabb = sections["scene.aabb"]
    field = RadianceField(config, aabb=(aabb[0], aabb[1]), params=FieldParams(arrays, groups))

    poses = {}
    if "poses.ids" in sections:
        for fid, row in zip(sections["poses.ids"], sections["poses.values"]):
            poses[int(fid)] = Pose(row[:4], row[4:])
    return field, poses
