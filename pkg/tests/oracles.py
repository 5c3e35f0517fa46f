"""Independent reference implementations used by the tests.

Nothing here goes through the BVH, the KD-tree or the hand-written
backward pass. Ray casts test every triangle in a flat loop via plane intersection plus
signed sub-triangle areas (a different formulation from the Moller-Trumbore
kernel), nearest neighbours are all-pairs, gradients are central
differences, and the geometric answers are closed-form.
"""

import numpy as np
from numba import njit, prange

RAY_EPS = 1e-5
PARALLEL_EPS = 1e-7


@njit(cache=True)
def _side(a, b, x, nv):
    """Signed area of (a, b, x) projected on the triangle normal."""
    ux, uy, uz = a[0] - x[0], a[1] - x[1], a[2] - x[2]
    wx, wy, wz = b[0] - x[0], b[1] - x[1], b[2] - x[2]
    return (uy * wz - uz * wy) * nv[0] + (uz * wx - ux * wz) * nv[1] + (ux * wy - uy * wx) * nv[2]


@njit(cache=True, parallel=True)
def _segments_blocked(v0, v1, v2, nrm, points, targets, eps):
    n, k, m = points.shape[0], targets.shape[0], v0.shape[0]
    out = np.zeros((n, k), dtype=np.bool_)
    for i in prange(n):
        o = points[i]
        x = np.empty(3)
        for j in range(k):
            dx, dy, dz = targets[j, 0] - o[0], targets[j, 1] - o[1], targets[j, 2] - o[2]
            length = np.sqrt(dx * dx + dy * dy + dz * dz)
            dx, dy, dz = dx / length, dy / length, dz / length
            for t_id in range(m):
                nv = nrm[t_id]
                denom = dx * nv[0] + dy * nv[1] + dz * nv[2]
                if abs(denom) <= PARALLEL_EPS * np.sqrt(nv[0] ** 2 + nv[1] ** 2 + nv[2] ** 2):
                    continue
                p = v0[t_id]
                t = ((p[0] - o[0]) * nv[0] + (p[1] - o[1]) * nv[1] + (p[2] - o[2]) * nv[2]) / denom
                if t <= eps or t >= length - eps:
                    continue
                x[0], x[1], x[2] = o[0] + t * dx, o[1] + t * dy, o[2] + t * dz
                # Barycentric weights from signed sub-areas projected on the normal.
                if (_side(v1[t_id], v2[t_id], x, nv) >= 0 and _side(v2[t_id], v0[t_id], x, nv) >= 0
                        and _side(v0[t_id], v1[t_id], x, nv) >= 0):
                    out[i, j] = True
                    break
    return out


def segments_blocked(mesh, points, targets, eps=RAY_EPS):
    """(n, k) bool: open segment points[i] -> targets[j] crosses some triangle."""
    c = np.ascontiguousarray(mesh.corners)
    v0, v1, v2 = (np.ascontiguousarray(c[:, i]) for i in range(3))
    nrm = np.cross(v1 - v0, v2 - v0)
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    return _segments_blocked(v0, v1, v2, nrm, points, targets, eps)


def ray_hits(mesh, origins, dirs, t_max, eps=RAY_EPS):
    """Any-hit for general rays (unit directions), same formulation as above."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (len(origins),))
    targets_blocked = np.zeros(len(origins), dtype=bool)
    for i in range(len(origins)):
        end = origins[i] + t_max[i] * dirs[i]
        targets_blocked[i] = segments_blocked(mesh, origins[i:i + 1], end[None], eps)[0, 0]
    return targets_blocked


def nearest_sq_dist(src, dst, chunk=512):
    """Squared distance from each src point to its nearest dst point, all pairs."""
    out = np.empty(len(src))
    d2 = np.einsum("ij,ij->i", dst, dst)
    for a in range(0, len(src), chunk):
        s = src[a:a + chunk]
        dist = np.einsum("ij,ij->i", s, s)[:, None] - 2.0 * s @ dst.T + d2[None]
        out[a:a + chunk] = np.maximum(dist.min(axis=1), 0.0)
    return out


def chamfer_bruteforce(a_pts, b_pts):
    return 0.5 * (nearest_sq_dist(a_pts, b_pts).mean() + nearest_sq_dist(b_pts, a_pts).mean())


def rectangle_solid_angle(half_w, half_h, dist):
    """Solid angle of a rectangle (half-sides w, h) seen from a point on its axis at distance d."""
    return 4.0 * np.arcsin(half_w * half_h / np.sqrt((half_w ** 2 + dist ** 2) * (half_h ** 2 + dist ** 2)))


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sphere_visible_fraction(center, radius, sensors, n=200_000, min_elevation=0.0):
    """Area fraction of a sphere visible from at least one sensor.

    A surface point p = c + r n sees sensor s iff the direction to s rises
    more than ``min_elevation`` radians above the tangent plane at p; with
    the default this is n . (s - c) > r.
    """
    dirs = fibonacci_sphere(n)
    c = np.asarray(center, dtype=np.float64)
    seen = np.zeros(n, dtype=bool)
    for s in np.asarray(sensors, dtype=np.float64):
        to_s = s - (c + radius * dirs)
        rise = np.einsum("ij,ij->i", dirs, to_s) / np.linalg.norm(to_s, axis=1)
        seen |= rise > np.sin(min_elevation)
    return float(seen.mean())


def numerical_gradient(f, x, h=1e-6):
    """Central differences of scalar f over every entry of array x (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def partial_derivatives(f, x, indices, h=1e-6):
    """Central differences of scalar f for the given flat entries of x only."""
    flat = x.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out

def facet_peak(albedo, area, dist, material):
    """Transient value of a small facet facing a confocal sensor head-on."""
    j, l = {"diffuse": (2, 4), "retroreflective": (4, 2)}[material]
    return albedo * area * 1.0 ** j / dist ** l
