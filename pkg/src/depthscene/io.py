"""Binary depth/voxel formats and JSON scene, pose and manifest files.

SDPT: b"SDPT", u32 width, u32 height, width*height float32 depths (row-major).
SVOX: b"SVOX", float32 resolution, float32[3] origin, u32 count, count*int32[3].
All little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .geometry import DepthImage, Pose, VoxelGrid

SDPT_MAGIC = b"SDPT"
SVOX_MAGIC = b"SVOX"


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_depth(d: DepthImage) -> bytes:
    body = np.ascontiguousarray(d.depth, dtype="<f4").tobytes()
    return SDPT_MAGIC + struct.pack("<II", d.width, d.height) + body


def decode_depth(data: bytes, far: float | None = None) -> DepthImage:
    if data[:4] != SDPT_MAGIC:
        raise FormatError("not an SDPT depth image")
    w, h = struct.unpack_from("<II", data, 4)
    n = w * h
    if len(data) != 12 + 4 * n:
        raise FormatError(f"SDPT payload has {len(data) - 12} bytes, expected {4 * n}")
    depth = np.frombuffer(data, dtype="<f4", count=n, offset=12).astype(np.float64).reshape(h, w)
    if far is None:
        far = float(depth.max()) if n else 0.0
    else:
        # float32 storage rounds the far sentinel; restore it exactly
        depth = np.where(depth >= np.float32(far), far, depth)
    return DepthImage(depth, far)


def write_depth(path, d: DepthImage) -> None:
    atomic_write_bytes(path, encode_depth(d))


def read_depth(path, far: float | None = None) -> DepthImage:
    return decode_depth(Path(path).read_bytes(), far)


def encode_voxels(g: VoxelGrid) -> bytes:
    head = SVOX_MAGIC + struct.pack("<f3fI", g.resolution, *g.origin, len(g))
    return head + np.ascontiguousarray(g.occupied, dtype="<i4").tobytes()


def decode_voxels(data: bytes) -> VoxelGrid:
    if data[:4] != SVOX_MAGIC:
        raise FormatError("not an SVOX voxel model")
    res, ox, oy, oz, n = struct.unpack_from("<f3fI", data, 4)
    if len(data) != 24 + 12 * n:
        raise FormatError("truncated SVOX payload")
    occ = np.frombuffer(data, dtype="<i4", count=3 * n, offset=24).reshape(n, 3)
    return VoxelGrid(float(res), occ, (ox, oy, oz))


def write_voxels(path, g: VoxelGrid) -> None:
    atomic_write_bytes(path, encode_voxels(g))


def read_voxels(path) -> VoxelGrid:
    return decode_voxels(Path(path).read_bytes())


def pose_to_json(p: Pose) -> dict:
    return {"quat_wxyz": [float(v) for v in p.quat], "translation": [float(v) for v in p.translation]}


def pose_from_json(d: dict) -> Pose:
    return Pose(d["quat_wxyz"], d["translation"])


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
