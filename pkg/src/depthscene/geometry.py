"""Rigid transforms, pinhole cameras, point clouds and voxel grids.

Conventions: camera frame is +z forward, +x right, +y down. Pixel (u, v)
has its center at integer image coordinates. Quaternions are (w, x, y, z).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "Pose",
    "CameraIntrinsics",
    "DepthImage",
    "PointCloud",
    "VoxelGrid",
    "TriangleMesh",
    "compose",
    "inverse",
    "rot_x",
    "rot_y",
    "rot_z",
    "look_at",
    "depth_to_cloud",
    "project_points",
    "transform_cloud",
    "voxelize",
    "voxel_to_mesh",
    "bounding_box",
    "box_mesh",
]


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t, rotation stored as a unit quaternion."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        # canonical hemisphere so equal rotations compare equal
        if q[0] < 0 or (q[0] == 0 and next((c for c in q[1:] if c != 0), 0) < 0):
            q = -q
        object.__setattr__(self, "quat", _frozen(q))
        object.__setattr__(
            self, "translation", _frozen(np.asarray(self.translation, dtype=np.float64).reshape(3))
        )

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        xyzw = Rotation.from_matrix(m[:3, :3]).as_quat()
        return cls(np.roll(xyzw, 1), m[:3, 3])

    @classmethod
    def from_rotation(cls, rot, translation=(0.0, 0.0, 0.0)) -> "Pose":
        xyzw = Rotation.from_matrix(np.asarray(rot, dtype=np.float64)).as_quat()
        return cls(np.roll(xyzw, 1), translation)

    @property
    def rotation(self) -> np.ndarray:
        return _quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return float(2.0 * np.arctan2(np.linalg.norm(self.quat[1:]), abs(self.quat[0])))

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self) -> str:
        return f"Pose(quat={np.round(self.quat, 6).tolist()}, translation={np.round(self.translation, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` first and then ``a``."""
    return Pose(_quat_mul(a.quat, b.quat), a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    qi = p.quat * np.array([1.0, -1.0, -1.0, -1.0])
    return Pose(qi, -(_quat_to_matrix(qi) @ p.translation))


def _axis_pose(axis: int, angle: float, translation) -> Pose:
    q = np.zeros(4)
    q[0] = np.cos(angle / 2)
    q[1 + axis] = np.sin(angle / 2)
    return Pose(q, translation)


def rot_x(angle: float, translation=(0.0, 0.0, 0.0)) -> Pose:
    return _axis_pose(0, angle, translation)


def rot_y(angle: float, translation=(0.0, 0.0, 0.0)) -> Pose:
    return _axis_pose(1, angle, translation)


def rot_z(angle: float, translation=(0.0, 0.0, 0.0)) -> Pose:
    return _axis_pose(2, angle, translation)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` whose optical axis passes through ``target``.

    The image "up" direction (-y in camera frame) projects onto ``up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("viewing direction is parallel to the up vector")
    x /= nx
    y = np.cross(z, x)
    return Pose.from_rotation(np.stack([x, y, z], axis=1), eye)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 5.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float, near=0.01, far=5.0) -> "CameraIntrinsics":
        """Square-pixel camera with horizontal field of view ``fov_deg`` and centered principal point."""
        f = (width / 2) / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height, near, far)

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Same field of view at a different resolution."""
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy,
            (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            width, height, self.near, self.far,
        )

    def as_tuple(self):
        return (float(self.fx), float(self.fy), float(self.cx), float(self.cy),
                int(self.width), int(self.height), float(self.near), float(self.far))


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Camera-frame z depths, shape (height, width). Background pixels hold ``far``."""

    depth: np.ndarray
    far: float

    def __post_init__(self):
        d = np.array(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth must be a 2D array")
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.depth < self.far

    def count(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def empty(cls, k: CameraIntrinsics) -> "DepthImage":
        return cls(np.full((k.height, k.width), k.far), k.far)

    def __eq__(self, other):
        return (isinstance(other, DepthImage) and self.far == other.far
                and np.array_equal(self.depth, other.depth))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame: str = "camera"

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud contains non-finite coordinates")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Occupied cells (i, j, k) cover ``origin + [i, i+1) * resolution`` per axis."""

    resolution: float
    occupied: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        occ = np.unique(np.asarray(self.occupied, dtype=np.int64).reshape(-1, 3), axis=0)
        occ.setflags(write=False)
        object.__setattr__(self, "occupied", occ)
        object.__setattr__(self, "origin", _frozen(np.asarray(self.origin).reshape(3)))

    def __len__(self) -> int:
        return len(self.occupied)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (min corner, max corner) of the occupied region."""
        if len(self) == 0:
            raise ValueError("empty voxel grid")
        lo = self.origin + self.occupied.min(axis=0) * self.resolution
        hi = self.origin + (self.occupied.max(axis=0) + 1) * self.resolution
        return lo, hi

    def centers(self) -> np.ndarray:
        return self.origin + (self.occupied + 0.5) * self.resolution


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = _frozen(np.asarray(self.vertices).reshape(-1, 3))
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def soup(self) -> np.ndarray:
        """Triangle corner coordinates, shape (T, 3, 3)."""
        return self.vertices[self.triangles]

    def area(self) -> float:
        s = self.soup()
        return float(0.5 * np.linalg.norm(np.cross(s[:, 1] - s[:, 0], s[:, 2] - s[:, 0]), axis=1).sum())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def depth_to_cloud(d: DepthImage, k: CameraIntrinsics) -> PointCloud:
    """Backproject non-background pixels into the camera frame, row-major order."""
    if (d.width, d.height) != (k.width, k.height):
        raise ValueError(f"image is {d.width}x{d.height}, intrinsics expect {k.width}x{k.height}")
    v, u = np.nonzero(d.valid)
    z = d.depth[v, u]
    pts = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=1)
    return PointCloud(pts, "camera")


def project_points(points, k: CameraIntrinsics) -> np.ndarray:
    """Continuous pixel coordinates (u, v) of camera-frame points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.stack([k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy], axis=1)


def transform_cloud(c: PointCloud, p: Pose, frame: str | None = None) -> PointCloud:
    return PointCloud(p.apply(c.points), frame or c.frame)


def voxelize(c: PointCloud, resolution: float = 0.01) -> VoxelGrid:
    """Occupancy of every cell containing at least one point.

    The grid origin is the cloud minimum snapped down to a multiple of
    ``resolution``.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if len(c) == 0:
        raise ValueError("cannot voxelize an empty cloud")
    origin = np.floor(c.points.min(axis=0) / resolution) * resolution
    idx = np.floor((c.points - origin) / resolution).astype(np.int64)
    return VoxelGrid(resolution, idx, origin)


# outward normal axis/sign -> the four cube corners of that face, counter-clockwise seen from outside
_FACE_CORNERS = {
    (0, -1): [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],
    (0, 1): [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
    (1, -1): [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],
    (1, 1): [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
    (2, -1): [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],
    (2, 1): [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
}


def voxel_to_mesh(g: VoxelGrid) -> TriangleMesh:
    """Cube surface per occupied voxel, dropping faces shared by two occupied voxels."""
    if len(g) == 0:
        raise ValueError("empty voxel grid")
    occ = g.occupied
    lo = occ.min(axis=0) - 1
    dims = occ.max(axis=0) - lo + 2
    keys = np.ravel_multi_index((occ - lo).T, dims)
    quads = []
    for (axis, sign), corners in _FACE_CORNERS.items():
        step = np.zeros(3, dtype=np.int64)
        step[axis] = sign
        nb = np.ravel_multi_index((occ + step - lo).T, dims)
        exposed = occ[~np.isin(nb, keys)]
        if len(exposed):
            quads.append(exposed[:, None, :] + np.asarray(corners)[None])
    quads = np.concatenate(quads)  # (Q, 4, 3) integer corners
    corners, inv = np.unique(quads.reshape(-1, 3), axis=0, return_inverse=True)
    inv = inv.reshape(-1, 4)
    tris = np.concatenate([inv[:, [0, 1, 2]], inv[:, [0, 2, 3]]])
    # interleave so each quad's two triangles are adjacent
    tris = tris.reshape(2, -1, 3).transpose(1, 0, 2).reshape(-1, 3)
    return TriangleMesh(g.origin + corners * g.resolution, tris)


def bounding_box(g: VoxelGrid) -> tuple[float, float, float]:
    """Axis-aligned (x, y, z) extents of the occupied region in meters."""
    if len(g) == 0:
        raise ValueError("empty voxel grid")
    n = g.occupied.max(axis=0) - g.occupied.min(axis=0) + 1
    return tuple(float(v) for v in n * g.resolution)


def box_mesh(lo, hi) -> TriangleMesh:
    """Closed 12-triangle box spanning corners ``lo`` and ``hi``."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    quads = np.array(list(_FACE_CORNERS.values()))
    corners, inv = np.unique(quads.reshape(-1, 3), axis=0, return_inverse=True)
    inv = inv.reshape(-1, 4)
    tris = np.concatenate([inv[:, [0, 1, 2]], inv[:, [0, 2, 3]]])
    return TriangleMesh(lo + corners * (hi - lo), tris)
