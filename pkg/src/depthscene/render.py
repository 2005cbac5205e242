"""Software z-buffer depth rasterizer.

Triangles are clipped against the near plane in camera space, projected with
the pinhole model and filled where the pixel center is inside (top-left rule
on shared edges). Depth is the camera-frame z, interpolated perspective
correctly. Pixels hit by nothing in [near, far] keep the ``far`` sentinel.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numba
import numpy as np

from .geometry import CameraIntrinsics, DepthImage, Pose, TriangleMesh, inverse
from .scene import SceneGraph

__all__ = [
    "set_threads",
    "get_threads",
    "scene_mesh",
    "render_depth",
    "render_batch",
    "render_mesh_transforms",
]

_THREADS = 1


def set_threads(n: int) -> None:
    """Worker count for batch rendering and scoring. Never changes results."""
    global _THREADS
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _THREADS = int(n)


def get_threads() -> int:
    return _THREADS


@numba.njit(cache=True, nogil=True, inline="always")
def _edge(sx, sy, ex, ey, px, py):
    # evaluated along a canonical endpoint order so a shared edge gives exact negatives
    if sx > ex or (sx == ex and sy > ey):
        return -((sx - ex) * (py - ey) - (sy - ey) * (px - ex))
    return (ex - sx) * (py - sy) - (ey - sy) * (px - sx)


@numba.njit(cache=True, nogil=True, inline="always")
def _owns_edge(sx, sy, ex, ey):
    dy = ey - sy
    return dy > 0 or (dy == 0 and ex - sx < 0)


@numba.njit(cache=True, nogil=True)
def _fill(ax0, ay0, az0, bx0, by0, bz0, cx0, cy0, cz0, fx, fy, cx, cy, width, height, near, zbuf):
    ia = 1.0 / az0
    ib = 1.0 / bz0
    ic = 1.0 / cz0
    ax = fx * ax0 * ia + cx
    ay = fy * ay0 * ia + cy
    bx = fx * bx0 * ib + cx
    by = fy * by0 * ib + cy
    qx = fx * cx0 * ic + cx
    qy = fy * cy0 * ic + cy
    x0 = max(0, int(math.ceil(min(ax, bx, qx))))
    x1 = min(width - 1, int(math.floor(max(ax, bx, qx))))
    if x1 < x0:
        return
    y0 = max(0, int(math.ceil(min(ay, by, qy))))
    y1 = min(height - 1, int(math.floor(max(ay, by, qy))))
    if y1 < y0:
        return
    area = _edge(ax, ay, bx, by, qx, qy)
    if area == 0.0 or not math.isfinite(area):
        return
    if area < 0.0:
        bx, qx = qx, bx
        by, qy = qy, by
        ib, ic = ic, ib
        area = -area
    own0 = _owns_edge(bx, by, qx, qy)
    own1 = _owns_edge(qx, qy, ax, ay)
    own2 = _owns_edge(ax, ay, bx, by)
    for py in range(y0, y1 + 1):
        fpy = float(py)
        for px in range(x0, x1 + 1):
            fpx = float(px)
            w0 = _edge(bx, by, qx, qy, fpx, fpy)
            if w0 < 0.0 or (w0 == 0.0 and not own0):
                continue
            w1 = _edge(qx, qy, ax, ay, fpx, fpy)
            if w1 < 0.0 or (w1 == 0.0 and not own1):
                continue
            w2 = _edge(ax, ay, bx, by, fpx, fpy)
            if w2 < 0.0 or (w2 == 0.0 and not own2):
                continue
            z = area / (w0 * ia + w1 * ib + w2 * ic)
            if z < zbuf[py, px] and z >= near:
                zbuf[py, px] = z


@numba.njit(cache=True, nogil=True)
def _fill_arr(a, b, c, fx, fy, cx, cy, width, height, near, zbuf):
    _fill(a[0], a[1], a[2], b[0], b[1], b[2], c[0], c[1], c[2],
          fx, fy, cx, cy, width, height, near, zbuf)


@numba.njit(cache=True, nogil=True)
def _lerp_near(p, q, near):
    # canonical endpoint order so neighbouring triangles clip a shared edge identically
    if p[0] > q[0] or (p[0] == q[0] and (p[1] > q[1] or (p[1] == q[1] and p[2] > q[2]))):
        p, q = q, p
    t = (near - p[2]) / (q[2] - p[2])
    out = np.empty(3)
    out[0] = p[0] + t * (q[0] - p[0])
    out[1] = p[1] + t * (q[1] - p[1])
    out[2] = near
    return out


@numba.njit(cache=True, nogil=True)
def _clip_and_fill(v0, v1, v2, fx, fy, cx, cy, width, height, near, zbuf):
    in0 = v0[2] >= near
    in1 = v1[2] >= near
    in2 = v2[2] >= near
    n_in = int(in0) + int(in1) + int(in2)
    if n_in == 0:
        return
    # rotate so the odd-one-out vertex comes first
    if n_in == 1:
        if in0:
            a, b, c = v0, v1, v2
        elif in1:
            a, b, c = v1, v2, v0
        else:
            a, b, c = v2, v0, v1
        _fill_arr(a, _lerp_near(a, b, near), _lerp_near(a, c, near),
                  fx, fy, cx, cy, width, height, near, zbuf)
    else:
        if not in0:
            a, b, c = v0, v1, v2
        elif not in1:
            a, b, c = v1, v2, v0
        else:
            a, b, c = v2, v0, v1
        ab = _lerp_near(b, a, near)
        ac = _lerp_near(c, a, near)
        _fill_arr(b, c, ac, fx, fy, cx, cy, width, height, near, zbuf)
        _fill_arr(b, ac, ab, fx, fy, cx, cy, width, height, near, zbuf)


@numba.njit(cache=True, nogil=True)
def _render_transforms(verts, tris, transforms, base, intr, out):
    """out[n] = base z-buffered with ``verts`` mapped by transforms[n] (3x4) into camera frame."""
    fx, fy, cx, cy, near = intr[0], intr[1], intr[2], intr[3], intr[4]
    height, width = base.shape
    nv = verts.shape[0]
    cam = np.empty((nv, 3))
    for n in range(transforms.shape[0]):
        m = transforms[n]
        for i in range(nv):
            x, y, z = verts[i, 0], verts[i, 1], verts[i, 2]
            cam[i, 0] = m[0, 0] * x + m[0, 1] * y + m[0, 2] * z + m[0, 3]
            cam[i, 1] = m[1, 0] * x + m[1, 1] * y + m[1, 2] * z + m[1, 3]
            cam[i, 2] = m[2, 0] * x + m[2, 1] * y + m[2, 2] * z + m[2, 3]
        zbuf = out[n]
        zbuf[:, :] = base
        for t in range(tris.shape[0]):
            i0 = tris[t, 0]
            i1 = tris[t, 1]
            i2 = tris[t, 2]
            if cam[i0, 2] >= near and cam[i1, 2] >= near and cam[i2, 2] >= near:
                _fill(cam[i0, 0], cam[i0, 1], cam[i0, 2], cam[i1, 0], cam[i1, 1], cam[i1, 2],
                      cam[i2, 0], cam[i2, 1], cam[i2, 2], fx, fy, cx, cy, width, height, near, zbuf)
            else:
                _clip_and_fill(cam[i0], cam[i1], cam[i2], fx, fy, cx, cy, width, height, near, zbuf)


def _intr(k: CameraIntrinsics) -> np.ndarray:
    return np.array([k.fx, k.fy, k.cx, k.cy, k.near, k.far], dtype=np.float64)


def _chunks(n: int, parts: int):
    parts = max(1, min(parts, n))
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [(bounds[i], bounds[i + 1]) for i in range(parts) if bounds[i + 1] > bounds[i]]


def render_mesh_transforms(mesh: TriangleMesh | tuple, transforms, k: CameraIntrinsics,
                           base: np.ndarray | None = None, threads: int | None = None) -> np.ndarray:
    """Render one mesh under many model-to-camera transforms, composited over ``base``.

    Args:
        mesh: TriangleMesh or (vertices, triangles) arrays.
        transforms: (N, 4, 4) or (N, 3, 4) model-to-camera matrices.
        base: (H, W) depth to start each z-buffer from; defaults to all-far.

    Returns:
        (N, H, W) float64 depths.
    """
    if isinstance(mesh, TriangleMesh):
        verts, tris = mesh.vertices, mesh.triangles
    else:
        verts, tris = mesh
    verts = np.ascontiguousarray(verts, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.int64)
    tf = np.ascontiguousarray(np.asarray(transforms, dtype=np.float64)[:, :3, :4])
    if base is None:
        base = np.full((k.height, k.width), k.far)
    base = np.ascontiguousarray(base, dtype=np.float64)
    out = np.empty((len(tf), k.height, k.width))
    intr = _intr(k)
    threads = threads or _THREADS
    spans = _chunks(len(tf), threads)
    if len(spans) <= 1:
        if len(tf):
            _render_transforms(verts, tris, tf, base, intr, out)
        return out
    with ThreadPoolExecutor(max_workers=len(spans)) as pool:
        list(pool.map(lambda s: _render_transforms(verts, tris, tf[s[0]:s[1]], base, intr, out[s[0]:s[1]]),
                      spans))
    return out


def scene_mesh(scene: SceneGraph, include_table: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """World-frame (vertices, triangles) of the whole scene, table first."""
    verts, tris, offset = [], [], 0
    parts = [(scene.table, Pose())] if include_table else []
    parts += [(c.obj, p) for c, p in zip(scene.children, scene.object_poses())]
    for obj, pose in parts:
        verts.append(pose.apply(obj.mesh.vertices))
        tris.append(obj.mesh.triangles + offset)
        offset += len(obj.mesh.vertices)
    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(verts), np.concatenate(tris)


def render_depth(scene: SceneGraph | None, camera: Pose, k: CameraIntrinsics) -> DepthImage:
    """Depth image of ``scene`` seen from the camera-to-world pose ``camera``.

    ``None`` renders an empty world.
    """
    if scene is None:
        return DepthImage.empty(k)
    mesh = scene_mesh(scene)
    view = inverse(camera).matrix()[None]
    return DepthImage(render_mesh_transforms(mesh, view, k, threads=1)[0], k.far)


def render_batch(hypotheses, k: CameraIntrinsics, threads: int | None = None) -> list[DepthImage]:
    """Render (scene, camera) pairs; identical to calling render_depth on each."""
    hypotheses = list(hypotheses)
    if not hypotheses:
        raise ValueError("empty hypothesis list")
    threads = threads or _THREADS

    def one(h):
        return render_depth(h[0], h[1], k)

    if threads == 1 or len(hypotheses) == 1:
        return [one(h) for h in hypotheses]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, hypotheses))
