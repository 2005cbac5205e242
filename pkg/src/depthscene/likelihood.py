"""Depth observation model: outlier/inlier point noise and its mixture density.

Each observed camera-frame point is, with probability ``p_outlier``, uniform
over the visible frustum and otherwise a rendered point plus isotropic
Gaussian noise. The density is

    prefactor * prod_i [ p/V + (1 - p)/|y| * sum_j N3(obs_i; ren_j, sigma^2 I) ]

with prefactor sigma/sigma_max (``prefactor="printed"``) or 1/sigma_max
(``prefactor="prior"``). The windowed variant restricts the inner sum to
rendered pixels within ``w`` pixels of the observed pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import CameraIntrinsics, DepthImage, PointCloud, depth_to_cloud

__all__ = [
    "NoiseParams",
    "visible_volume",
    "sample_observation_cloud",
    "cloud_to_depth",
    "sample_observation",
    "full_log_likelihood",
    "windowed_log_likelihood",
    "joint_noise_prior_logpdf",
    "default_window",
    "log_prefactor",
    "WindowScorer",
    "CloudScorer",
]

PREFACTORS = ("printed", "prior")


@dataclass(frozen=True)
class NoiseParams:
    p_outlier: float
    sigma_noise: float

    def in_support(self, sigma_max: float) -> bool:
        return 0.0 <= self.p_outlier <= 1.0 and 0.0 < self.sigma_noise <= sigma_max


def visible_volume(k: CameraIntrinsics) -> float:
    """Volume of the viewing frustum between the near and far planes."""
    return (k.far ** 3 - k.near ** 3) / 3.0 * (k.width / k.fx) * (k.height / k.fy)


def default_window(width: int, height: int) -> int:
    """Window radius 2 at 100x100, scaled with resolution, at least 1."""
    return max(1, int(round(2 * max(width, height) / 100)))


def log_prefactor(noise: NoiseParams, sigma_max: float, prefactor: str = "printed") -> float:
    if prefactor == "printed":
        return math.log(noise.sigma_noise / sigma_max)
    if prefactor == "prior":
        return -math.log(sigma_max)
    raise ValueError(f"prefactor must be one of {PREFACTORS}")


def joint_noise_prior_logpdf(noise: NoiseParams, sigma_max: float) -> float:
    """Uniform p_outlier on [0, 1] and sigma_noise on (0, sigma_max]."""
    if not noise.in_support(sigma_max):
        return -math.inf
    return -math.log(sigma_max)


# -- forward sampling -----------------------------------------------------------

def _uniform_frustum(rng: np.random.Generator, k: CameraIntrinsics, n: int) -> np.ndarray:
    # depth density on the frustum is proportional to z^2
    z = np.cbrt(k.near ** 3 + rng.random(n) * (k.far ** 3 - k.near ** 3))
    u = rng.uniform(-0.5, k.width - 0.5, n)
    v = rng.uniform(-0.5, k.height - 0.5, n)
    return np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=1)


def sample_observation_cloud(y: DepthImage, k: CameraIntrinsics, noise: NoiseParams,
                             rng: np.random.Generator, with_replacement: bool = False) -> PointCloud:
    """Noisy camera-frame cloud with as many points as ``y`` has valid pixels.

    Inlier sources are a random permutation of the rendered points by
    default; ``with_replacement=True`` draws each source independently.
    """
    c = depth_to_cloud(y, k).points
    n = len(c)
    if n == 0:
        raise ValueError("rendered image has no valid pixels")
    outlier = rng.random(n) < noise.p_outlier
    src = rng.integers(0, n, n) if with_replacement else rng.permutation(n)
    pts = c[src] + rng.normal(0.0, noise.sigma_noise, (n, 3))
    n_out = int(outlier.sum())
    if n_out:
        pts[outlier] = _uniform_frustum(rng, k, n_out)
    return PointCloud(pts, "camera")


def cloud_to_depth(c: PointCloud, k: CameraIntrinsics) -> DepthImage:
    """Nearest-pixel reprojection; the smallest z wins, unhit pixels get ``far``."""
    out = np.full((k.height, k.width), k.far)
    p = c.points
    if len(p) == 0:
        return DepthImage(out, k.far)
    z = p[:, 2]
    ok = (z >= k.near) & (z < k.far)
    p, z = p[ok], z[ok]
    u = np.rint(k.fx * p[:, 0] / z + k.cx).astype(np.int64)
    v = np.rint(k.fy * p[:, 1] / z + k.cy).astype(np.int64)
    inside = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    np.minimum.at(out, (v[inside], u[inside]), z[inside])
    return DepthImage(out, k.far)


def sample_observation(y: DepthImage, k: CameraIntrinsics, noise: NoiseParams,
                       rng: np.random.Generator, with_replacement: bool = False) -> DepthImage:
    return cloud_to_depth(sample_observation_cloud(y, k, noise, rng, with_replacement), k)


# -- densities --------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@numba.njit(cache=True, nogil=True)
def _cloud_log_sums(obs, ren, inv2s2, out):
    """out[s, i] = log sum_j exp(-|obs_i - ren_j|^2 * inv2s2[s])."""
    m = obs.shape[0]
    n = ren.shape[0]
    d2 = np.empty(n)
    for i in range(m):
        dmin = np.inf
        for j in range(n):
            dx = obs[i, 0] - ren[j, 0]
            dy = obs[i, 1] - ren[j, 1]
            dz = obs[i, 2] - ren[j, 2]
            d2[j] = dx * dx + dy * dy + dz * dz
            if d2[j] < dmin:
                dmin = d2[j]
        for s in range(inv2s2.shape[0]):
            acc = 0.0
            for j in range(n):
                acc += math.exp(-(d2[j] - dmin) * inv2s2[s])
            out[s, i] = math.log(acc) - dmin * inv2s2[s]


@numba.njit(cache=True, nogil=True)
def _mixture_sum(log_s, log_out, log_in):
    """sum_i logaddexp(log_out, log_in + log_s[i]) in index order."""
    total = 0.0
    for i in range(log_s.shape[0]):
        total += _logaddexp(log_out, log_in + log_s[i])
    return total


def _gauss_consts(sigma: float) -> tuple[float, float]:
    return 0.5 / sigma ** 2, -1.5 * math.log(2 * math.pi * sigma ** 2)


def _mixture_logs(noise: NoiseParams, vol: float, count: int) -> tuple[float, float]:
    log_out = math.log(noise.p_outlier / vol) if noise.p_outlier > 0 else -math.inf
    log_in = math.log1p(-noise.p_outlier) - math.log(count) if noise.p_outlier < 1 else -math.inf
    return log_out, log_in


def _check_noise(noise: NoiseParams) -> None:
    if not noise.sigma_noise > 0:
        raise ValueError("sigma_noise must be positive")


def full_log_likelihood(obs: PointCloud, rendered: PointCloud, noise: NoiseParams, vol: float,
                        sigma_max: float, prefactor: str = "printed") -> float:
    """Log mixture density of every observed point against every rendered point."""
    if len(rendered) == 0:
        raise ValueError("rendered cloud is empty")
    _check_noise(noise)
    if not noise.in_support(sigma_max):
        return -math.inf
    inv2s2, log_norm = _gauss_consts(noise.sigma_noise)
    log_s = np.empty((1, len(obs)))
    _cloud_log_sums(np.ascontiguousarray(obs.points), np.ascontiguousarray(rendered.points),
                    np.array([inv2s2]), log_s)
    log_out, log_in = _mixture_logs(noise, vol, len(rendered))
    body = _mixture_sum(log_s[0] + log_norm, log_out, log_in)
    return log_prefactor(noise, sigma_max, prefactor) + body


@numba.njit(cache=True, nogil=True)
def _backproject(depth, far, fx, fy, cx, cy):
    h, w = depth.shape
    pts = np.empty((h, w, 3))
    for v in range(h):
        for u in range(w):
            z = depth[v, u]
            pts[v, u, 0] = (u - cx) * z / fx
            pts[v, u, 1] = (v - cy) * z / fy
            pts[v, u, 2] = z
    return pts


@numba.njit(cache=True, nogil=True)
def _window_log_sums(obs_pts, obs_valid, ren_pts, ren_valid, rows, cols, w, inv2s2, log_norm, out):
    """out[s, n] = log sum over the window of N3 for observed pixel (rows[n], cols[n]).

    Rendered pixels inside the window are visited in row-major order.
    """
    h, wd = obs_valid.shape
    ns = inv2s2.shape[0]
    d2 = np.empty((2 * w + 1) ** 2)
    for n in range(rows.shape[0]):
        v = rows[n]
        u = cols[n]
        if not obs_valid[v, u]:
            for s in range(ns):
                out[s, n] = -np.inf
            continue
        ox = obs_pts[v, u, 0]
        oy = obs_pts[v, u, 1]
        oz = obs_pts[v, u, 2]
        cnt = 0
        dmin = np.inf
        for vv in range(max(0, v - w), min(h, v + w + 1)):
            for uu in range(max(0, u - w), min(wd, u + w + 1)):
                if ren_valid[vv, uu]:
                    dx = ox - ren_pts[vv, uu, 0]
                    dy = oy - ren_pts[vv, uu, 1]
                    dz = oz - ren_pts[vv, uu, 2]
                    dd = dx * dx + dy * dy + dz * dz
                    d2[cnt] = dd
                    cnt += 1
                    if dd < dmin:
                        dmin = dd
        for s in range(ns):
            if cnt == 0:
                out[s, n] = -np.inf
                continue
            acc = 0.0
            for c in range(cnt):
                acc += math.exp(-(d2[c] - dmin) * inv2s2[s])
            out[s, n] = math.log(acc) - dmin * inv2s2[s] + log_norm[s]


def _check_dims(obs: DepthImage, rendered: DepthImage, k: CameraIntrinsics) -> None:
    if obs.depth.shape != rendered.depth.shape or obs.depth.shape != (k.height, k.width):
        raise ValueError("observed and rendered images must match the intrinsics' dimensions")


def windowed_log_likelihood(obs: DepthImage, rendered: DepthImage, k: CameraIntrinsics,
                            noise: NoiseParams, vol: float, sigma_max: float, w: int,
                            prefactor: str = "printed") -> float:
    """Mixture log density with each observed pixel's Gaussian sum truncated to a window.

    Observed background pixels are skipped; |y| is the global count of valid
    rendered pixels.
    """
    _check_dims(obs, rendered, k)
    if w < 0:
        raise ValueError("window radius must be non-negative")
    _check_noise(noise)
    if not noise.in_support(sigma_max):
        return -math.inf
    count = rendered.count()
    if count == 0:
        raise ValueError("rendered image has no valid pixels")
    scorer = WindowScorer(obs, k, [noise.sigma_noise], vol, sigma_max, w, prefactor)
    return float(scorer.log_likelihoods(rendered.depth, [noise])[0])


class WindowScorer:
    """Windowed likelihood of many renders against one observation.

    Gaussian window sums are computed once per distinct sigma and reused for
    every outlier probability. ``prepare_base`` caches per-pixel sums of a
    base render so renders that differ from it only locally are rescored
    incrementally; the result equals a direct evaluation up to summation
    order.
    """

    def __init__(self, obs: DepthImage, k: CameraIntrinsics, sigmas, vol: float, sigma_max: float,
                 w: int, prefactor: str = "printed"):
        if obs.depth.shape != (k.height, k.width):
            raise ValueError("observation does not match intrinsics")
        if prefactor not in PREFACTORS:
            raise ValueError(f"prefactor must be one of {PREFACTORS}")
        self.k = k
        self.w = int(w)
        self.vol = float(vol)
        self.sigma_max = float(sigma_max)
        self.prefactor = prefactor
        self.sigmas = np.array(sorted(set(float(s) for s in sigmas)))
        if np.any(self.sigmas <= 0):
            raise ValueError("sigma_noise must be positive")
        self.inv2s2 = 0.5 / self.sigmas ** 2
        self.log_norm = -1.5 * np.log(2 * np.pi * self.sigmas ** 2)
        self.obs_valid = np.ascontiguousarray(obs.valid)
        self.obs_pts = _backproject(np.ascontiguousarray(obs.depth), obs.far, k.fx, k.fy, k.cx, k.cy)
        self.rows, self.cols = (a.astype(np.int64) for a in np.nonzero(self.obs_valid))
        self._pixel_index = np.full(self.obs_valid.shape, -1, dtype=np.int64)
        self._pixel_index[self.rows, self.cols] = np.arange(len(self.rows))
        self.base = None
        self._noise_cache = {}

    def _sigma_index(self, sigma: float) -> int:
        i = int(np.searchsorted(self.sigmas, sigma))
        if i >= len(self.sigmas) or self.sigmas[i] != sigma:
            raise KeyError(f"sigma {sigma} was not registered with this scorer")
        return i

    def log_sums(self, depth: np.ndarray, rows=None, cols=None) -> np.ndarray:
        """(n_sigma, n_pixels) log Gaussian window sums at the given observed pixels."""
        k = self.k
        ren_valid = depth < k.far
        ren_pts = _backproject(np.ascontiguousarray(depth), k.far, k.fx, k.fy, k.cx, k.cy)
        rows = self.rows if rows is None else rows
        cols = self.cols if cols is None else cols
        out = np.empty((len(self.sigmas), len(rows)))
        _window_log_sums(self.obs_pts, self.obs_valid, ren_pts, ren_valid, rows, cols, self.w,
                         self.inv2s2, self.log_norm, out)
        return out

    def _noise_arrays(self, noises, count: int):
        """Per-noise sigma index, log outlier and log inlier terms, prefactor and support flags."""
        key = tuple(noises)
        fixed = self._noise_cache.get(key)
        if fixed is None:
            n = len(noises)
            sig = np.zeros(n, dtype=np.int64)
            lo = np.full(n, -np.inf)
            l1p = np.full(n, -np.inf)
            pre = np.zeros(n)
            ok = np.zeros(n, dtype=np.bool_)
            for j, nz in enumerate(noises):
                if not nz.in_support(self.sigma_max):
                    continue
                ok[j] = True
                sig[j] = self._sigma_index(nz.sigma_noise)
                lo[j], l1p[j] = _mixture_logs(nz, self.vol, 1)
                pre[j] = log_prefactor(nz, self.sigma_max, self.prefactor)
            fixed = self._noise_cache[key] = (sig, lo, l1p, pre, ok)
        sig, lo, l1p, pre, ok = fixed
        if count == 0:
            return sig, lo, l1p, pre, np.zeros_like(ok)
        return sig, lo, l1p - math.log(count), pre, ok

    def _total(self, log_s: np.ndarray, count: int, noises) -> np.ndarray:
        return self._patched_total(log_s, _EMPTY_IDX, _EMPTY_S, count, noises)

    def _patched_total(self, base_s, idx, new_s, count: int, noises) -> np.ndarray:
        sig, lo, li, pre, ok = self._noise_arrays(noises, count)
        out = np.full(len(noises), -np.inf)
        if ok.any():
            body = np.empty(len(noises))
            _patched_mixture_sums(base_s, idx, new_s, sig, lo, li, body)
            out[ok] = pre[ok] + body[ok]
        return out

    def log_likelihoods(self, depth: np.ndarray, noises) -> np.ndarray:
        """Direct evaluation for each noise setting."""
        count = int((depth < self.k.far).sum())
        return self._total(self.log_sums(depth), count, noises)

    def prepare_base(self, depth: np.ndarray) -> None:
        depth = np.array(depth, dtype=np.float64)
        self.base = (depth, self.log_sums(depth), int((depth < self.k.far).sum()))
        self._base_terms = {}

    def _terms(self, noises, count: int):
        """Cached per-pixel mixture terms of the base render and their sums."""
        key = (tuple(noises), count)
        hit = self._base_terms.get(key)
        if hit is None:
            sig, lo, li, _, _ = self._noise_arrays(noises, count)
            terms = np.empty((len(noises), self.base[1].shape[1]))
            _mixture_terms(self.base[1], sig, lo, li, terms)
            hit = self._base_terms[key] = (terms, terms.sum(axis=1))
        return hit

    def log_likelihoods_incremental(self, depth: np.ndarray, noises) -> np.ndarray:
        """``log_likelihoods`` recomputing window sums only near pixels that differ from the base.

        The result matches direct evaluation up to floating-point summation
        order (about 1e-12 relative).
        """
        if self.base is None:
            raise RuntimeError("prepare_base must be called first")
        base_depth, base_s, base_count = self.base
        changed = depth != base_depth
        if not changed.any():
            return self._total(base_s, base_count, noises)
        vs, us = np.nonzero(changed)
        w = self.w
        h, wd = changed.shape
        # affected observed pixels: bounding box of the change grown by the window
        v0, v1 = max(0, vs.min() - w), min(h, vs.max() + w + 1)
        u0, u1 = max(0, us.min() - w), min(wd, us.max() + w + 1)
        idx = self._pixel_index[v0:v1, u0:u1].ravel()
        idx = np.sort(idx[idx >= 0])
        count = int((depth < self.k.far).sum())
        new_s = self.log_sums(depth, self.rows[idx], self.cols[idx])
        sig, lo, li, pre, ok = self._noise_arrays(noises, count)
        out = np.full(len(noises), -np.inf)
        if not ok.any():
            return out
        terms, totals = self._terms(noises, count)
        new_terms = np.empty((len(noises), len(idx)))
        _mixture_terms(new_s, sig, lo, li, new_terms)
        old = terms[:, idx].sum(axis=1)
        body = totals - old + new_terms.sum(axis=1)
        bad = ok & ~(np.isfinite(totals) & np.isfinite(old))
        if bad.any():
            # an -inf base term cannot be subtracted; sum the patched terms directly
            body[bad] = self._patched_total(base_s, idx, new_s, count, [noises[j] for j in np.nonzero(bad)[0]]) \
                - pre[bad]
        out[ok] = pre[ok] + body[ok]
        return out


@numba.njit(cache=True, nogil=True)
def _mixture_terms(log_s, sig, log_out, log_in, out):
    """out[g, i] = logaddexp(log_out[g], log_in[g] + log_s[sig[g], i])."""
    for g in range(sig.shape[0]):
        s = sig[g]
        for i in range(log_s.shape[1]):
            out[g, i] = _logaddexp(log_out[g], log_in[g] + log_s[s, i])


_EMPTY_IDX = np.zeros(0, dtype=np.int64)
_EMPTY_S = np.zeros((1, 0))


@numba.njit(cache=True, nogil=True)
def _patched_mixture_sums(base_s, idx, new_s, sig, log_out, log_in, out):
    """Mixture sums over pixels where pixel idx[j] takes new_s[:, j] instead of base_s.

    ``idx`` must be sorted; pixels are summed in index order.
    """
    n = base_s.shape[1]
    for g in range(sig.shape[0]):
        s = sig[g]
        lo = log_out[g]
        li = log_in[g]
        total = 0.0
        j = 0
        for i in range(n):
            if j < idx.shape[0] and idx[j] == i:
                v = new_s[s, j]
                j += 1
            else:
                v = base_s[s, i]
            total += _logaddexp(lo, li + v)
        out[g] = total


class CloudScorer:
    """All-pairs likelihood of many renders against one observation (no windowing)."""

    def __init__(self, obs: DepthImage, k: CameraIntrinsics, sigmas, vol: float, sigma_max: float,
                 prefactor: str = "printed"):
        if prefactor not in PREFACTORS:
            raise ValueError(f"prefactor must be one of {PREFACTORS}")
        self.k = k
        self.vol = float(vol)
        self.sigma_max = float(sigma_max)
        self.prefactor = prefactor
        self.sigmas = np.array(sorted(set(float(s) for s in sigmas)))
        self.inv2s2 = 0.5 / self.sigmas ** 2
        self.log_norm = -1.5 * np.log(2 * np.pi * self.sigmas ** 2)
        self.obs_pts = np.ascontiguousarray(depth_to_cloud(obs, k).points)

    def log_likelihoods(self, depth: np.ndarray, noises) -> np.ndarray:
        ren = np.ascontiguousarray(depth_to_cloud(DepthImage(depth, self.k.far), self.k).points)
        count = len(ren)
        res = np.full(len(noises), -np.inf)
        if count == 0:
            return res
        log_s = np.empty((len(self.sigmas), len(self.obs_pts)))
        _cloud_log_sums(self.obs_pts, ren, self.inv2s2, log_s)
        log_s += self.log_norm[:, None]
        for n, nz in enumerate(noises):
            if not nz.in_support(self.sigma_max):
                continue
            si = int(np.searchsorted(self.sigmas, nz.sigma_noise))
            log_out, log_in = _mixture_logs(nz, self.vol, count)
            res[n] = log_prefactor(nz, self.sigma_max, self.prefactor) + _mixture_sum(log_s[si], log_out, log_in)
        return res

    log_likelihoods_incremental = log_likelihoods

    def prepare_base(self, depth: np.ndarray) -> None:
        pass
