"""Confocal three-bounce transient rendering.

Every triangle is integrated with stratified point samples. A sample p with
normal n contributes to scan position s

    rho * v(s, p) * max(cos(n, w), 0)**j / |s - p|**l * area / spp

in the time bin nearest to tau = 2 |s - p| / c, with (j, l) = (2, 4) for
diffuse and (4, 2) for retroreflective surfaces. Intensities are in
arbitrary but consistent units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange

from .bvh import RAY_EPS, Bvh, any_hit_kernel
from .geometry import TriangleMesh
from .scene import SPEED_OF_LIGHT, SceneConfig

EXPONENTS = {"diffuse": (2, 4), "retroreflective": (4, 2)}


class RenderError(ValueError):
    pass


@dataclass
class TransientVolume:
    """Histogram m(s, tau) with shape (n_x, n_y, n_bins)."""

    data: np.ndarray
    bin_width_ps: float
    wall_extent: tuple[float, float]
    material: str = "diffuse"

    @property
    def shape(self):
        return self.data.shape

    def sidecar(self) -> dict:
        return {
            "shape": list(self.data.shape),
            "bin_ps": self.bin_width_ps,
            "wall_extent_m": list(self.wall_extent),
            "material": self.material,
            "scale": "arbitrary",
            "dtype": "float32",
            "order": "x,y,t",
        }

    def save(self, path) -> None:
        """Raw little-endian float32 in (x, y, t) order plus a .json sidecar."""
        path = Path(path)
        path.write_bytes(np.ascontiguousarray(self.data, dtype="<f4").tobytes())
        Path(str(path) + ".json").write_text(json.dumps(self.sidecar(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TransientVolume":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
        return cls(data.astype(np.float64), float(meta["bin_ps"]), tuple(meta["wall_extent_m"]),
                   meta.get("material", "diffuse"))


def stratified_barycentric(spp: int) -> np.ndarray:
    """Deterministic stratified barycentric coordinates, shape (spp, 3).

    The unit square is split into an nx x ny grid of strata (nx * ny = spp)
    whose centers are warped onto the triangle with the area-preserving
    square-root map.
    """
    if spp < 1:
        raise ValueError("samples_per_triangle must be >= 1")
    nx = max(d for d in range(1, int(np.sqrt(spp)) + 1) if spp % d == 0)
    ny = spp // nx
    u = (np.arange(nx) + 0.5) / nx
    v = (np.arange(ny) + 0.5) / ny
    uu, vv = np.meshgrid(u, v, indexing="ij")
    su = np.sqrt(uu.ravel())
    return np.stack([1.0 - su, su * (1.0 - vv.ravel()), su * vv.ravel()], axis=1)


def surface_samples(mesh: TriangleMesh, spp: int):
    """Sample positions, normals and weights (rho * area / spp) for every triangle."""
    bary = stratified_barycentric(spp)
    c = mesh.corners
    pts = np.einsum("sk,tkd->tsd", bary, c).reshape(-1, 3)
    normals = np.repeat(mesh.normals, spp, axis=0)
    weights = np.repeat(mesh.albedo * mesh.areas / spp, spp)
    return pts, normals, weights


@njit(cache=True, parallel=True)
def _render(args, has_bvh, scan, pts, normals, weights, j, l, bin_len, n_bins, linear, eps, out):
    lo, hi, left, right, start, count, order, v0, e1, e2 = args
    n_scan = scan.shape[0]
    n_pts = pts.shape[0]
    overflow = 0
    for si in prange(n_scan):
        d = np.empty(3)
        hist = out[si]
        for k in range(n_pts):
            dist2 = 0.0
            for a in range(3):
                d[a] = scan[si, a] - pts[k, a]
                dist2 += d[a] * d[a]
            dist = np.sqrt(dist2)
            cosv = 0.0
            for a in range(3):
                d[a] /= dist
                cosv += normals[k, a] * d[a]
            if cosv <= 0.0:
                continue
            if has_bvh and any_hit_kernel(lo, hi, left, right, start, count, order,
                                          v0, e1, e2, pts[k], d, eps, dist - eps):
                continue
            val = weights[k] * cosv ** j / dist ** l
            # bin_len is the one-way distance covered by one time bin.
            x = dist / bin_len
            if linear:
                b0 = int(np.floor(x))
                f = x - b0
                if b0 + 1 >= n_bins:
                    overflow += 1
                    continue
                hist[b0] += val * (1.0 - f)
                hist[b0 + 1] += val * f
            else:
                b = int(np.floor(x + 0.5))
                if b >= n_bins:
                    overflow += 1
                    continue
                hist[b] += val
    return overflow


def render(mesh: TriangleMesh, bvh: Bvh | None, config: SceneConfig,
           samples_per_triangle: int = 4, linear_bins: bool = False,
           occlusion: bool = True) -> TransientVolume:
    """Render the confocal transient of a mesh for the wall grid in ``config``.

    ``bvh`` must index ``mesh`` (or the full scene it belongs to); pass
    ``occlusion=False`` to drop the visibility term.
    """
    j, l = EXPONENTS[config.material]
    pts, normals, weights = surface_samples(mesh, samples_per_triangle)
    scan = config.wall.positions
    bin_len = config.bin_width_s * SPEED_OF_LIGHT / 2.0
    nx, ny = config.wall.resolution
    out = np.zeros((nx * ny, config.n_bins))
    use_bvh = occlusion and bvh is not None
    if use_bvh:
        args = bvh.kernel_args
    else:
        z = np.zeros((1, 3))
        zi = np.zeros(1, dtype=np.int64)
        args = (z, z, zi, zi, zi, zi, zi, z, z, z)
    overflow = _render(args, use_bvh, scan, pts, normals, weights, j, l, bin_len,
                       config.n_bins, linear_bins, RAY_EPS, out)
    if overflow:
        raise RenderError("histogram too short")
    return TransientVolume(out.reshape(nx, ny, config.n_bins), config.bin_width_ps,
                           tuple(config.wall.extent), config.material)
