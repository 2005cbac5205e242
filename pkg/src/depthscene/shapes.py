"""Procedural voxel objects standing in for tabletop items in synthetic experiments.

Every builder returns a VoxelGrid in the model-frame convention used by
learned models: x/y centered on the bounding box, z=0 at its bottom.
"""

from __future__ import annotations

import numpy as np

from .geometry import VoxelGrid
from .scene import ObjectModel

__all__ = ["from_mask", "box", "cylinder", "mug", "bottle", "drill", "clamp", "hammer",
           "dumbbell", "l_block", "wedge", "make_library", "SHAPES"]


def from_mask(mask: np.ndarray, resolution: float) -> VoxelGrid:
    """Occupied cells of a boolean (nx, ny, nz) array, recentered to the model frame."""
    idx = np.argwhere(mask)
    if len(idx) == 0:
        raise ValueError("empty shape")
    lo = idx.min(axis=0)
    hi = idx.max(axis=0) + 1
    # integer shift keeps the grid aligned; half-voxel origin offsets finish the centering
    shift = np.array([(lo[0] + hi[0]) // 2, (lo[1] + hi[1]) // 2, lo[2]])
    idx = idx - shift
    origin = -0.5 * np.array([(hi[0] - lo[0]) % 2, (hi[1] - lo[1]) % 2, 0]) * resolution
    return VoxelGrid(resolution, idx, origin)


CM = 0.01


def _centers(nx: float, ny: float, nz: float, resolution: float):
    """Voxel-center coordinates in centimetres over an nx x ny x nz cm block."""
    s = resolution / CM
    axes = [(np.arange(max(1, int(round(n / s)))) + 0.5) * s for n in (nx, ny, nz)]
    return np.meshgrid(*axes, indexing="ij")


def box(nx: int, ny: int, nz: int, resolution: float = 0.01) -> VoxelGrid:
    """Solid block of nx x ny x nz voxels."""
    return from_mask(np.ones((nx, ny, nz), dtype=bool), resolution)


def _disc(cx: float, cy: float, x, y, r_out: float, r_in: float = -1.0):
    d = np.hypot(x - cx, y - cy)
    return (d <= r_out) & (d > r_in)


def _solid(w: float, d: float, h: float, resolution: float) -> VoxelGrid:
    x, _, _ = _centers(w, d, h, resolution)
    return from_mask(np.ones(x.shape, dtype=bool), resolution)


# The named shapes below are sized in centimetres and tested at voxel centers,
# so a finer resolution gives a smoother copy of the same physical object.

def cylinder(radius: float = 4, height: float = 8, resolution: float = 0.01) -> VoxelGrid:
    x, y, _ = _centers(2 * radius, 2 * radius, height, resolution)
    return from_mask(_disc(radius, radius, x, y, radius), resolution)


def mug(radius: float = 4, height: float = 10, handle: float = 3, resolution: float = 0.01) -> VoxelGrid:
    """Open cylinder shell with a floor and a rectangular loop handle on +x."""
    n = 2 * radius
    x, y, z = _centers(n + handle, n, height, resolution)
    body = _disc(radius, radius, x, y, radius, radius - 1.2) | (_disc(radius, radius, x, y, radius) & (z < 1))
    body &= x < n
    hz0, hz1 = height // 4, height - height // 4
    ring = (x > n) & (np.abs(y - radius) < 1) & (z > hz0) & (z < hz1)
    ring &= (x > n + handle - 1) | (z < hz0 + 1) | (z > hz1 - 1)
    return from_mask(body | ring, resolution)


def bottle(resolution: float = 0.01) -> VoxelGrid:
    """Squeeze-bottle: flattened body, shoulder, offset cap."""
    x, y, z = _centers(9, 6, 19, resolution)
    body = (z < 14) & (np.abs(x - 4.5) < 4.5) & (np.abs(y - 3) < 3)
    shoulder = (z > 14) & (z < 16) & (np.abs(x - 4.5) < 2.5) & (np.abs(y - 3) < 2)
    cap = (z > 16) & (x > 5) & (x < 7) & (np.abs(y - 3) < 1)
    return from_mask(body | shoulder | cap, resolution)


def drill(resolution: float = 0.01) -> VoxelGrid:
    """Power-drill silhouette: base plate, handle column, barrel with chuck."""
    x, y, z = _centers(16, 5, 18, resolution)
    base = (z < 3) & (x < 9)
    grip = (x > 3) & (x < 7) & (y > 1) & (y < 4)
    barrel = (z > 12) & (x < 13)
    chuck = (z > 13) & (z < 17) & (x > 13) & (y > 1) & (y < 4)
    return from_mask(base | grip | barrel | chuck, resolution)


def clamp(resolution: float = 0.01) -> VoxelGrid:
    """C-clamp: two jaws joined by a back bar, screw through the lower jaw."""
    x, y, z = _centers(12, 3, 11, resolution)
    back = x < 2
    top = (z > 8) & (x < 10)
    bottom = (z < 3) & (x < 7)
    screw = (x > 8) & (x < 10) & (y > 1) & (y < 2) & (z < 8)
    return from_mask(back | top | bottom | screw, resolution)


def hammer(resolution: float = 0.01) -> VoxelGrid:
    """T-shape lying flat: long handle plus a head crossbar at one end."""
    x, y, z = _centers(16, 10, 2, resolution)
    handle = (np.abs(y - 5) < 1) & (x < 14)
    head = x > 13
    return from_mask(handle | head, resolution)


def dumbbell(resolution: float = 0.01) -> VoxelGrid:
    """Bar with a weight block at each end, lying flat."""
    x, y, z = _centers(14, 6, 5, resolution)
    bar = (np.abs(y - 3) < 1) & (z > 1) & (z < 4)
    weights = (x < 3) | (x > 11)
    return from_mask(bar | weights, resolution)


def l_block(resolution: float = 0.01) -> VoxelGrid:
    x, y, z = _centers(10, 6, 8, resolution)
    return from_mask((x < 3) | (z < 3) | ((y < 2) & (x < 6)), resolution)


def wedge(resolution: float = 0.01) -> VoxelGrid:
    x, _, z = _centers(10, 5, 10, resolution)
    return from_mask(z <= x + 1e-9, resolution)


SHAPES = {
    "mug": mug,
    "bottle": bottle,
    "drill": drill,
    "clamp": clamp,
    "hammer": hammer,
    "dumbbell": dumbbell,
    "l_block": l_block,
    "cube": lambda resolution=0.01: _solid(6, 6, 6, resolution),
    "plank": lambda resolution=0.01: _solid(14, 4, 2, resolution),
    "tower": lambda resolution=0.01: _solid(4, 4, 12, resolution),
    "cylinder": cylinder,
    "wedge": wedge,
}


def make_library(names, resolution: float = 0.01) -> list[ObjectModel]:
    """ObjectModels with ids 0..n-1 in the order given."""
    return [ObjectModel.from_grid(i, SHAPES[n](resolution=resolution), n) for i, n in enumerate(names)]
