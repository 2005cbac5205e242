"""Shared fixtures and brute-force reference implementations used as test oracles."""

import math

import numpy as np
import pytest

from depthscene import shapes
from depthscene.generative import camera_from_params
from depthscene.geometry import CameraIntrinsics, inverse
from depthscene.render import scene_mesh
from depthscene.scene import SceneGraph, make_table, sample_child


def raycast_depth(scene, camera, k):
    """Per-pixel Moller-Trumbore ray casting against every scene triangle.

    Returns camera-frame z of the nearest hit at or beyond the near plane,
    ``far`` where nothing is hit.
    """
    verts, tris = scene_mesh(scene)
    cam_v = inverse(camera).apply(verts)
    tri = cam_v[tris]  # (T, 3, 3)
    a, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    out = np.full((k.height, k.width), k.far)
    for v in range(k.height):
        for u in range(k.width):
            d = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
            p = np.cross(d, e2)
            det = np.einsum("ij,ij->i", e1, p)
            ok = np.abs(det) > 1e-15
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            s = -a
            bu = np.einsum("ij,ij->i", s, p) * inv
            q = np.cross(s, e1)
            bv = (q @ d) * inv
            t = np.einsum("ij,ij->i", e2, q) * inv
            hit = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t >= k.near) & (t < k.far)
            if hit.any():
                out[v, u] = t[hit].min()  # d has unit z, so the ray parameter is depth
    return out


def edge_mask(depth, far, jump=0.005):
    """Pixels whose 3x3 neighborhood contains a depth discontinuity or the background."""
    h, w = depth.shape
    pad = np.pad(depth, 1, mode="edge")
    mask = np.zeros((h, w), dtype=bool)
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            nb = pad[1 + dv:1 + dv + h, 1 + du:1 + du + w]
            mask |= np.abs(nb - depth) > jump
            mask |= (nb >= far) != (depth >= far)
    return mask


def full_loglik_oracle(obs_pts, ren_pts, p, sigma, vol, sigma_max, prefactor="printed"):
    """Plain double loop over observed and rendered points."""
    n = len(ren_pts)
    norm = (2 * math.pi * sigma ** 2) ** -1.5
    total = math.log(sigma / sigma_max) if prefactor == "printed" else -math.log(sigma_max)
    for o in obs_pts:
        # the Gaussian terms may underflow; add in log space
        lg = [math.log(norm) - float(np.sum((o - r) ** 2)) / (2 * sigma ** 2) for r in ren_pts]
        m = max(lg)
        log_inner = m + math.log(sum(math.exp(x - m) for x in lg))
        a = math.log(p / vol) if p > 0 else -math.inf
        b = math.log1p(-p) - math.log(n) + log_inner if p < 1 else -math.inf
        hi = max(a, b)
        total += hi + math.log(math.exp(a - hi) + math.exp(b - hi))
    return total


def window_loglik_oracle(obs, ren, k, p, sigma, vol, sigma_max, w, prefactor="printed"):
    """Masked double loop: each valid observed pixel against valid rendered pixels within w."""
    def point(d, v, u):
        z = d[v, u]
        return np.array([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])

    count = int((ren < k.far).sum())
    total = math.log(sigma / sigma_max) if prefactor == "printed" else -math.log(sigma_max)
    log_out = math.log(p / vol) if p > 0 else -math.inf
    for v in range(k.height):
        for u in range(k.width):
            if obs[v, u] >= k.far:
                continue
            o = point(obs, v, u)
            lg = []
            for vv in range(k.height):
                for uu in range(k.width):
                    if abs(vv - v) <= w and abs(uu - u) <= w and ren[vv, uu] < k.far:
                        r = point(ren, vv, uu)
                        lg.append(-1.5 * math.log(2 * math.pi * sigma ** 2)
                                  - float(np.sum((o - r) ** 2)) / (2 * sigma ** 2))
            if lg and p < 1:
                m = max(lg)
                b = math.log1p(-p) - math.log(count) + m + math.log(sum(math.exp(x - m) for x in lg))
            else:
                b = -math.inf
            hi = max(log_out, b)
            if hi == -math.inf:
                return -math.inf
            total += hi + math.log(math.exp(log_out - hi) + math.exp(b - hi))
    return total


def random_scene(rng, library, n=1, table=None):
    table = table or make_table()
    scene = SceneGraph(table)
    for _ in range(n):
        c = sample_child(rng, library, table)
        scene = scene.add_child(c.obj, c.face, c.contact)
    return scene


def random_camera(rng, distance=(0.6, 0.9)):
    return camera_from_params(rng.uniform(*distance), rng.uniform(0, 2 * math.pi),
                              rng.uniform(math.radians(30), math.radians(60)))


@pytest.fixture(scope="session")
def small_library():
    return shapes.make_library(["mug", "l_block", "cube"])


@pytest.fixture
def k32():
    return CameraIntrinsics.from_fov(32, 32, 40.0)
