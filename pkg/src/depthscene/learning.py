"""Object models from a handful of calibrated depth frames.

Frames are backprojected into the world frame and overlaid, the object is
cropped out with an axis-aligned box, and the cloud is discretized into an
occupancy grid whose exposed voxel faces form the render mesh.
"""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, DepthImage, PointCloud, Pose, VoxelGrid, depth_to_cloud, transform_cloud
from .scene import ObjectModel

__all__ = ["fuse_views", "crop_to_region", "recenter", "occupancy", "voxelize_centered", "recenter_grid",
           "learned_cloud", "learn_object"]


def fuse_views(frames, camera_poses, k: CameraIntrinsics) -> PointCloud:
    """World-frame union of every frame's backprojection, in frame order."""
    frames, camera_poses = list(frames), list(camera_poses)
    if len(frames) != len(camera_poses):
        raise ValueError(f"{len(frames)} frames but {len(camera_poses)} poses")
    if not frames:
        raise ValueError("need at least one frame")
    parts = [transform_cloud(depth_to_cloud(f, k), p, "world").points for f, p in zip(frames, camera_poses)]
    return PointCloud(np.concatenate(parts), "world")


def crop_to_region(c: PointCloud, lo, hi) -> PointCloud:
    """Points strictly inside the box (lo, hi), order preserved."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi < lo):
        raise ValueError("crop box needs lo <= hi, both 3-vectors")
    keep = np.all((c.points > lo) & (c.points < hi), axis=1)
    return PointCloud(c.points[keep], c.frame)


def recenter(c: PointCloud) -> PointCloud:
    """Shift so the bounding box is x/y centered on the origin with its bottom at z=0."""
    lo, hi = c.points.min(axis=0), c.points.max(axis=0)
    shift = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2]])
    return PointCloud(c.points - shift, "model")


def _nudged_cloud(frame: DepthImage, pose: Pose, k: CameraIntrinsics, push: float) -> np.ndarray:
    # a visible surface point has material right behind it along the ray; moving it there
    # settles samples lying exactly on a cell boundary into the occupied cell
    pts = depth_to_cloud(frame, k).points
    pts = pts * (1.0 + push / np.linalg.norm(pts, axis=1))[:, None]
    return pose.apply(pts)


def occupancy(frames, camera_poses, k: CameraIntrinsics, lo, hi, resolution: float = 0.01,
              push: float = 1e-6) -> VoxelGrid:
    """World-aligned occupancy of the cropped, fused views.

    Cells are fixed in the world, so adding views can only add cells.
    """
    frames, camera_poses = list(frames), list(camera_poses)
    if len(frames) != len(camera_poses):
        raise ValueError(f"{len(frames)} frames but {len(camera_poses)} poses")
    if not frames:
        raise ValueError("need at least one frame")
    pts = np.concatenate([_nudged_cloud(f, p, k, push) for f, p in zip(frames, camera_poses)])
    cloud = crop_to_region(PointCloud(pts, "world"), lo, hi)
    if len(cloud) == 0:
        raise ValueError("no points inside the crop box")
    return VoxelGrid(resolution, *_world_cells(cloud.points, resolution))


def _world_cells(points: np.ndarray, r: float):
    idx = np.unique(np.floor(points / r).astype(np.int64), axis=0)
    return idx, np.zeros(3)


def recenter_grid(g: VoxelGrid) -> VoxelGrid:
    """Same cells re-expressed in the model frame: x/y centered, bottom at z=0."""
    lo = g.occupied.min(axis=0)
    hi = g.occupied.max(axis=0) + 1
    shift = np.array([(lo[0] + hi[0]) // 2, (lo[1] + hi[1]) // 2, lo[2]])
    origin = -0.5 * np.array([(hi[0] - lo[0]) % 2, (hi[1] - lo[1]) % 2, 0]) * g.resolution
    return VoxelGrid(g.resolution, g.occupied - shift, origin)


def voxelize_centered(c: PointCloud, resolution: float) -> VoxelGrid:
    """Occupancy of a recentered cloud on cells laid out symmetrically about its bounding box.

    Each axis gets round(extent / resolution) cells (at least one), so a box
    whose sides are whole multiples of the resolution is reproduced exactly
    instead of straddling one extra world-aligned cell.
    """
    if len(c) == 0:
        raise ValueError("empty cloud")
    pts = c.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    n = np.maximum(1, np.round((hi - lo) / resolution)).astype(np.int64)
    start = np.array([(lo[0] + hi[0] - n[0] * resolution) / 2, (lo[1] + hi[1] - n[1] * resolution) / 2, lo[2]])
    idx = np.clip(np.floor((pts - start) / resolution).astype(np.int64), 0, n - 1)
    return recenter_grid(VoxelGrid(resolution, np.unique(idx, axis=0), np.zeros(3)))


def learned_cloud(frames, camera_poses, k: CameraIntrinsics, lo, hi) -> PointCloud:
    """The fused views cropped to the object, still in the world frame."""
    cloud = crop_to_region(fuse_views(frames, camera_poses, k), lo, hi)
    if len(cloud) == 0:
        raise ValueError("no points inside the crop box")
    return cloud


def learn_object(frames, camera_poses, k: CameraIntrinsics, lo, hi, resolution: float = 0.01,
                 id: int = 0, name: str = "") -> ObjectModel:
    """Fuse, crop, recenter, voxelize and mesh one object."""
    cloud = learned_cloud(frames, camera_poses, k, lo, hi)
    return ObjectModel.from_grid(id, voxelize_centered(recenter(cloud), resolution), name)
