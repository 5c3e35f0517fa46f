"""Bounding-volume hierarchy over triangles with any-hit and closest-hit queries.

Triangles are two-sided. A hit counts when its ray parameter lies strictly
inside (eps, t_max - eps). The hierarchy is built by median split on the
longest node axis with at most ``LEAF_SIZE`` triangles per leaf and is
traversed by numba kernels; batched entry points run in parallel over rays.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .geometry import GeometryError, Ray, TriangleMesh

LEAF_SIZE = 4
RAY_EPS = 1e-5
# Ray/plane parallelism cutoff on the normalized Moller-Trumbore determinant.
DET_EPS = 1e-7
STACK_SIZE = 64

# The TBB layer is often too old on stock installs; workqueue is always there.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"
if "NLOS_THREADS" in os.environ:
    numba.set_num_threads(max(1, min(numba.config.NUMBA_NUM_THREADS, int(os.environ["NLOS_THREADS"]))))


@dataclass(frozen=True)
class Bvh:
    """Flattened hierarchy. Leaves reference ``order[start:start + count]``."""

    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    order: np.ndarray
    # Triangle data in leaf order: first vertex and the two edge vectors.
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    n_triangles: int

    @property
    def n_nodes(self) -> int:
        return len(self.node_lo)

    @property
    def kernel_args(self):
        return (
            self.node_lo, self.node_hi, self.node_left, self.node_right,
            self.node_start, self.node_count, self.order, self.v0, self.e1, self.e2,
        )


@njit(cache=True)
def _build(tri_lo, tri_hi, centroid, leaf_size):
    m = tri_lo.shape[0]
    max_nodes = 2 * m
    node_lo = np.empty((max_nodes, 3))
    node_hi = np.empty((max_nodes, 3))
    node_left = -np.ones(max_nodes, dtype=np.int64)
    node_right = -np.ones(max_nodes, dtype=np.int64)
    node_start = np.zeros(max_nodes, dtype=np.int64)
    node_count = np.zeros(max_nodes, dtype=np.int64)
    order = np.arange(m)

    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_start = np.empty(max_nodes, dtype=np.int64)
    stack_end = np.empty(max_nodes, dtype=np.int64)
    sp = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        start = stack_start[sp]
        end = stack_end[sp]
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for i in range(start, end):
            t = order[i]
            for a in range(3):
                if tri_lo[t, a] < lo[a]:
                    lo[a] = tri_lo[t, a]
                if tri_hi[t, a] > hi[a]:
                    hi[a] = tri_hi[t, a]
        node_lo[node] = lo
        node_hi[node] = hi
        count = end - start
        if count <= leaf_size:
            node_start[node] = start
            node_count[node] = count
            continue
        ext = hi - lo
        axis = 0
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        seg = order[start:end].copy()
        keys = np.empty(count)
        for i in range(count):
            keys[i] = centroid[seg[i], axis]
        perm = np.argsort(keys, kind="mergesort")
        for i in range(count):
            order[start + i] = seg[perm[i]]
        mid = start + count // 2
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_left[node] = left
        node_right[node] = right
        stack_node[sp] = right
        stack_start[sp] = mid
        stack_end[sp] = end
        sp += 1
        stack_node[sp] = left
        stack_start[sp] = start
        stack_end[sp] = mid
        sp += 1
    return (
        node_lo[:n_nodes], node_hi[:n_nodes], node_left[:n_nodes],
        node_right[:n_nodes], node_start[:n_nodes], node_count[:n_nodes], order,
    )


def build_bvh(mesh: TriangleMesh) -> Bvh:
    """Build a hierarchy over the mesh triangles."""
    if len(mesh) == 0:
        raise GeometryError("empty geometry")
    c = mesh.corners
    tri_lo = c.min(axis=1)
    tri_hi = c.max(axis=1)
    # Pad boxes so that rays grazing a face are never culled by round-off.
    pad = 1e-9 * max(1.0, float(np.abs(c).max()))
    lo, hi, left, right, start, count, order = _build(
        tri_lo - pad, tri_hi + pad, c.mean(axis=1), LEAF_SIZE
    )
    co = c[order]
    return Bvh(
        lo, hi, left, right, start, count, order,
        np.ascontiguousarray(co[:, 0]),
        np.ascontiguousarray(co[:, 1] - co[:, 0]),
        np.ascontiguousarray(co[:, 2] - co[:, 0]),
        len(mesh),
    )


# ---------------------------------------------------------------------------
# Kernels


@njit(cache=True, inline="always")
def _box_entry(lo, hi, o, d, t0, t1):
    """Entry parameter of the ray into an AABB clipped to [t0, t1], or inf."""
    tnear = t0
    tfar = t1
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return np.inf
        else:
            inv = 1.0 / d[a]
            ta = (lo[a] - o[a]) * inv
            tb = (hi[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > tnear:
                tnear = ta
            if tb < tfar:
                tfar = tb
            if tnear > tfar:
                return np.inf
    return tnear


@njit(cache=True, inline="always")
def _intersect(o, d, v0, e1, e2, det_eps):
    """Moller-Trumbore. Returns (t, u, v); t is inf on a miss."""
    px = d[1] * e2[2] - d[2] * e2[1]
    py = d[2] * e2[0] - d[0] * e2[2]
    pz = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    nx = e1[1] * e2[2] - e1[2] * e2[1]
    ny = e1[2] * e2[0] - e1[0] * e2[2]
    nz = e1[0] * e2[1] - e1[1] * e2[0]
    nn = np.sqrt(nx * nx + ny * ny + nz * nz)
    if abs(det) <= det_eps * nn:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    sx = o[0] - v0[0]
    sy = o[1] - v0[1]
    sz = o[2] - v0[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = sy * e1[2] - sz * e1[1]
    qy = sz * e1[0] - sx * e1[2]
    qz = sx * e1[1] - sy * e1[0]
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    return t, u, v


@njit(cache=True)
def any_hit_kernel(lo, hi, left, right, start, count, order, v0, e1, e2, o, d, t_min, t_max):
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    sp = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_entry(lo[node], hi[node], o, d, t_min, t_max) == np.inf:
            continue
        if left[node] < 0:
            for i in range(start[node], start[node] + count[node]):
                t, _, _ = _intersect(o, d, v0[i], e1[i], e2[i], DET_EPS)
                if t > t_min and t < t_max:
                    return True
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return False


@njit(cache=True)
def closest_hit_kernel(lo, hi, left, right, start, count, order, v0, e1, e2, o, d, t_min, t_max):
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    best_t = t_max
    best_i = -1
    best_u = 0.0
    best_v = 0.0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_entry(lo[node], hi[node], o, d, t_min, best_t) == np.inf:
            continue
        if left[node] < 0:
            for i in range(start[node], start[node] + count[node]):
                t, u, v = _intersect(o, d, v0[i], e1[i], e2[i], DET_EPS)
                if t > t_min and t < best_t:
                    best_t = t
                    best_i = i
                    best_u = u
                    best_v = v
        else:
            a = left[node]
            b = right[node]
            ta = _box_entry(lo[a], hi[a], o, d, t_min, best_t)
            tb = _box_entry(lo[b], hi[b], o, d, t_min, best_t)
            # Push the farther child first so the nearer one is visited next.
            if ta <= tb:
                if tb != np.inf:
                    stack[sp] = b
                    sp += 1
                if ta != np.inf:
                    stack[sp] = a
                    sp += 1
            else:
                if ta != np.inf:
                    stack[sp] = a
                    sp += 1
                if tb != np.inf:
                    stack[sp] = b
                    sp += 1
    if best_i < 0:
        return np.inf, -1, 0.0, 0.0
    return best_t, order[best_i], best_u, best_v


@njit(cache=True, parallel=True)
def _any_hit_batch(args, origins, dirs, t_max, eps):
    lo, hi, left, right, start, count, order, v0, e1, e2 = args
    n = origins.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for r in prange(n):
        out[r] = any_hit_kernel(
            lo, hi, left, right, start, count, order, v0, e1, e2,
            origins[r], dirs[r], eps, t_max[r] - eps,
        )
    return out


@njit(cache=True, parallel=True)
def _closest_hit_batch(args, origins, dirs, t_max, eps):
    lo, hi, left, right, start, count, order, v0, e1, e2 = args
    n = origins.shape[0]
    ts = np.empty(n)
    ids = np.empty(n, dtype=np.int64)
    bary = np.zeros((n, 3))
    for r in prange(n):
        t, i, u, v = closest_hit_kernel(
            lo, hi, left, right, start, count, order, v0, e1, e2,
            origins[r], dirs[r], eps, t_max[r],
        )
        ts[r] = t
        ids[r] = i
        bary[r, 0] = 1.0 - u - v
        bary[r, 1] = u
        bary[r, 2] = v
    return ts, ids, bary


@njit(cache=True, parallel=True)
def _segments_blocked(args, points, targets, t_min, eps):
    """Bit matrix: segment points[i] -> targets[j] is blocked by the mesh."""
    lo, hi, left, right, start, count, order, v0, e1, e2 = args
    n = points.shape[0]
    k = targets.shape[0]
    out = np.zeros((n, k), dtype=np.bool_)
    for i in prange(n):
        d = np.empty(3)
        for j in range(k):
            dist = 0.0
            for a in range(3):
                d[a] = targets[j, a] - points[i, a]
                dist += d[a] * d[a]
            dist = np.sqrt(dist)
            if dist <= t_min + eps:
                continue
            for a in range(3):
                d[a] /= dist
            out[i, j] = any_hit_kernel(
                lo, hi, left, right, start, count, order, v0, e1, e2,
                points[i], d, t_min, dist - eps,
            )
    return out


# ---------------------------------------------------------------------------
# Public queries


def _as_batch(origins, dirs, t_max):
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs / np.linalg.norm(dirs, axis=1, keepdims=True))
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (len(origins),))
    return origins, dirs, np.ascontiguousarray(t_max)


def any_hit(bvh: Bvh, ray: Ray, eps: float = RAY_EPS) -> bool:
    """True iff some triangle is hit with t in (eps, t_max - eps)."""
    return bool(any_hit_kernel(*bvh.kernel_args, ray.origin, ray.direction, eps, ray.t_max - eps))


def closest_hit(bvh: Bvh, ray: Ray, eps: float = RAY_EPS):
    """Nearest hit with t > eps as (t, triangle_id, barycentric), or None."""
    t, i, u, v = closest_hit_kernel(*bvh.kernel_args, ray.origin, ray.direction, eps, ray.t_max)
    if i < 0:
        return None
    return float(t), int(i), np.array([1.0 - u - v, u, v])


def any_hit_batch(bvh: Bvh, origins, dirs, t_max=np.inf, eps: float = RAY_EPS) -> np.ndarray:
    o, d, tm = _as_batch(origins, dirs, t_max)
    return _any_hit_batch(bvh.kernel_args, o, d, tm, eps)


def closest_hit_batch(bvh: Bvh, origins, dirs, t_max=np.inf, eps: float = RAY_EPS):
    """Vectorized closest_hit. Misses have t = inf and id = -1."""
    o, d, tm = _as_batch(origins, dirs, t_max)
    return _closest_hit_batch(bvh.kernel_args, o, d, tm, eps)


def segments_blocked(bvh: Bvh, points, targets, eps: float = RAY_EPS,
                     t_min: float | None = None) -> np.ndarray:
    """(n, k) boolean matrix of blocked segments from each point to each target.

    Hits count for t in (t_min, |target - point| - eps); t_min defaults to eps.
    """
    p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    t = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    return _segments_blocked(bvh.kernel_args, p, t, eps if t_min is None else t_min, eps)
