"""Numeric hot loops with two interchangeable backends.

Three kernels dominate episode runtime: point-cloud overlap counting
(memory updates), ray/box occlusion tests (panoramic sensing), and 2D
ray casting (structure sensing).  Each has a numba ``@njit`` build and a
pure-numpy build; both compute identical IEEE arithmetic so results are
bit-for-bit equal.

Backend selection: the ``DEMANDNAV_KERNELS`` env var may be ``numba``,
``numpy`` or ``auto`` (default).  ``auto`` uses numba when importable.
``benchmarks/kernel_bench.py`` times the two side by side.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_VAR = "DEMANDNAV_KERNELS"
_EPS_T = 1e-9  # tolerance on the ray parameter so surface points do not self-block


# ---------------------------------------------------------------------------
# numpy backend

def _points_within_np(points: np.ndarray, ref: np.ndarray, delta: float) -> np.ndarray:
    """Boolean mask: points within `delta` of any reference point."""
    d2 = delta * delta
    out = np.zeros(len(points), dtype=np.bool_)
    # chunked so the (chunk, M, 3) intermediate stays small
    for lo in range(0, len(points), 1024):
        chunk = points[lo:lo + 1024]
        diff = chunk[:, None, :] - ref[None, :, :]
        dist2 = (diff * diff).sum(axis=2)
        out[lo:lo + 1024] = (dist2 <= d2).any(axis=1)
    return out


def _visible_points_np(camera: np.ndarray, points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Mask of points whose segment from `camera` is not cut by any box.

    A box blocks a point iff the ray enters it strictly before reaching
    the point (entry parameter < 1 - eps), so points lying on a box's
    camera-facing surface stay visible while its far faces self-occlude.
    """
    n = len(points)
    visible = np.ones(n, dtype=np.bool_)
    if len(boxes) == 0 or n == 0:
        return visible
    d = points - camera[None, :]  # (n, 3)
    for b in range(len(boxes)):
        lo = boxes[b, 0::2]  # xmin, ymin, zmin
        hi = boxes[b, 1::2]
        t_enter = np.full(n, -np.inf)
        t_exit = np.full(n, np.inf)
        for k in range(3):
            dk = d[:, k]
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo[k] - camera[k]) / dk
                t2 = (hi[k] - camera[k]) / dk
            moving = dk != 0.0
            inside = (camera[k] >= lo[k]) & (camera[k] <= hi[k])
            tmin = np.where(moving, np.minimum(t1, t2), np.where(inside, -np.inf, np.inf))
            tmax = np.where(moving, np.maximum(t1, t2), np.where(inside, np.inf, -np.inf))
            t_enter = np.maximum(t_enter, tmin)
            t_exit = np.minimum(t_exit, tmax)
        blocked = (t_enter <= t_exit) & (t_exit > 0.0) & (t_enter < 1.0 - _EPS_T)
        visible &= ~blocked
    return visible


def _raycast_np(
    origin: np.ndarray, angles: np.ndarray, boxes: np.ndarray, bounds: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-azimuth first hit: entry distance, exit distance of the hit box,
    and box index (-1 = bounds)."""
    k = len(angles)
    dx = np.cos(angles)
    dy = np.sin(angles)
    best = np.full(k, np.inf)
    best_exit = np.full(k, np.inf)
    idx = np.full(k, -1, dtype=np.int64)
    for b in range(len(boxes)):
        s_enter, s_exit = _slab2d_np(origin, dx, dy, boxes[b])
        hit = (s_enter <= s_exit) & (s_exit > 0.0) & (s_enter > 0.0)
        closer = hit & (s_enter < best)
        best = np.where(closer, s_enter, best)
        best_exit = np.where(closer, s_exit, best_exit)
        idx = np.where(closer, b, idx)
    # scene perimeter: the ray leaves the bounds rectangle at s_exit
    s_enter, s_exit = _slab2d_np(origin, dx, dy, bounds)
    closer = (s_exit > 0.0) & (s_exit < best)
    best = np.where(closer, s_exit, best)
    best_exit = np.where(closer, s_exit, best_exit)
    idx = np.where(closer, -1, idx)
    return best, best_exit, idx


def _slab2d_np(origin, dx, dy, rect):
    t_enter = np.full(len(dx), -np.inf)
    t_exit = np.full(len(dx), np.inf)
    for k, dk in ((0, dx), (1, dy)):
        lo, hi = rect[2 * k], rect[2 * k + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin[k]) / dk
            t2 = (hi - origin[k]) / dk
        moving = dk != 0.0
        inside = (origin[k] >= lo) & (origin[k] <= hi)
        tmin = np.where(moving, np.minimum(t1, t2), np.where(inside, -np.inf, np.inf))
        tmax = np.where(moving, np.maximum(t1, t2), np.where(inside, np.inf, -np.inf))
        t_enter = np.maximum(t_enter, tmin)
        t_exit = np.minimum(t_exit, tmax)
    return t_enter, t_exit


# ---------------------------------------------------------------------------
# numba backend

try:
    from numba import njit

    _HAVE_NUMBA = True

    @njit(cache=True)
    def _points_within_jit(points, ref, delta):  # pragma: no cover - jitted
        n = points.shape[0]
        m = ref.shape[0]
        d2 = delta * delta
        out = np.zeros(n, dtype=np.bool_)
        for i in range(n):
            for j in range(m):
                dx = points[i, 0] - ref[j, 0]
                dy = points[i, 1] - ref[j, 1]
                dz = points[i, 2] - ref[j, 2]
                if dx * dx + dy * dy + dz * dz <= d2:
                    out[i] = True
                    break
        return out

    @njit(cache=True)
    def _visible_points_jit(camera, points, boxes):  # pragma: no cover - jitted
        n = points.shape[0]
        visible = np.ones(n, dtype=np.bool_)
        for i in range(n):
            for b in range(boxes.shape[0]):
                t_enter = -np.inf
                t_exit = np.inf
                ok = True
                for k in range(3):
                    dk = points[i, k] - camera[k]
                    lo = boxes[b, 2 * k]
                    hi = boxes[b, 2 * k + 1]
                    if dk != 0.0:
                        t1 = (lo - camera[k]) / dk
                        t2 = (hi - camera[k]) / dk
                        tmin = min(t1, t2)
                        tmax = max(t1, t2)
                    else:
                        if lo <= camera[k] <= hi:
                            tmin, tmax = -np.inf, np.inf
                        else:
                            ok = False
                            break
                    if tmin > t_enter:
                        t_enter = tmin
                    if tmax < t_exit:
                        t_exit = tmax
                if not ok:
                    continue
                if t_enter <= t_exit and t_exit > 0.0 and t_enter < 1.0 - _EPS_T:
                    visible[i] = False
                    break
        return visible

    @njit(cache=True)
    def _raycast_jit(origin, angles, boxes, bounds):  # pragma: no cover - jitted
        k = angles.shape[0]
        best = np.full(k, np.inf)
        best_exit = np.full(k, np.inf)
        idx = np.full(k, -1, dtype=np.int64)
        for i in range(k):
            dx = np.cos(angles[i])
            dy = np.sin(angles[i])
            for b in range(boxes.shape[0]):
                s_enter, s_exit = _slab2d_jit(origin, dx, dy, boxes[b])
                if s_enter <= s_exit and s_exit > 0.0 and s_enter > 0.0 and s_enter < best[i]:
                    best[i] = s_enter
                    best_exit[i] = s_exit
                    idx[i] = b
            s_enter, s_exit = _slab2d_jit(origin, dx, dy, bounds)
            if s_exit > 0.0 and s_exit < best[i]:
                best[i] = s_exit
                best_exit[i] = s_exit
                idx[i] = -1
        return best, best_exit, idx

    @njit(cache=True)
    def _slab2d_jit(origin, dx, dy, rect):  # pragma: no cover - jitted
        t_enter = -np.inf
        t_exit = np.inf
        for k in range(2):
            dk = dx if k == 0 else dy
            lo = rect[2 * k]
            hi = rect[2 * k + 1]
            if dk != 0.0:
                t1 = (lo - origin[k]) / dk
                t2 = (hi - origin[k]) / dk
                tmin = min(t1, t2)
                tmax = max(t1, t2)
            else:
                if lo <= origin[k] <= hi:
                    tmin, tmax = -np.inf, np.inf
                else:
                    tmin, tmax = np.inf, -np.inf
            if tmin > t_enter:
                t_enter = tmin
            if tmax < t_exit:
                t_exit = tmax
        return t_enter, t_exit

except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# dispatch

def _resolve_backend(name: str) -> str:
    if name == "numpy":
        return "numpy"
    if name == "numba":
        if not _HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return "numba"
    if name == "auto":
        return "numba" if _HAVE_NUMBA else "numpy"
    raise ValueError(f"unknown kernel backend {name!r} (use numba, numpy or auto)")


_BACKEND = _resolve_backend(os.environ.get(_ENV_VAR, "auto"))


def active_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Switch backend at runtime (used by tests and the benchmark)."""
    global _BACKEND
    _BACKEND = _resolve_backend(name)
    return _BACKEND


def points_within(points: np.ndarray, ref: np.ndarray, delta: float) -> np.ndarray:
    """Mask of `points` lying within `delta` of any point in `ref`.

    Both arrays are (N, 3) float64 world-frame coordinates.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    if _BACKEND == "numba":
        return _points_within_jit(points, ref, float(delta))
    return _points_within_np(points, ref, float(delta))


def visible_points(camera: np.ndarray, points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Mask of `points` with unblocked line of sight from `camera`.

    `boxes` is (M, 6): xmin, xmax, ymin, ymax, zmin, zmax.  A point on a
    box surface is visible from the outside of that box but occluded by
    its interior (far faces are hidden).
    """
    camera = np.ascontiguousarray(camera, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6)
    if _BACKEND == "numba":
        return _visible_points_jit(camera, points, boxes)
    return _visible_points_np(camera, points, boxes)


def raycast(
    origin: np.ndarray, angles: np.ndarray, boxes: np.ndarray, bounds: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cast planar rays against box footprints and the scene perimeter.

    `boxes` is (M, 4): xmin, xmax, ymin, ymax.  `bounds` is the scene
    rectangle in the same layout.  Returns per-ray entry distance (may
    be inf), exit distance of the hit box, and the hit box index, -1
    meaning the perimeter.
    """
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    angles = np.ascontiguousarray(angles, dtype=np.float64)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    bounds = np.ascontiguousarray(bounds, dtype=np.float64)
    if _BACKEND == "numba":
        return _raycast_jit(origin, angles, boxes, bounds)
    return _raycast_np(origin, angles, boxes, bounds)
