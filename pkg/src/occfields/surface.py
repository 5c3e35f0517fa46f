"""From occlusion values to surfaces.

Grids hold field values at cell centers of a regular subdivision of the
hidden cube. Marching cubes runs on the grid padded with one layer of zeros
so the occluded hull closes at the cube faces. The closed hull is then split
into the wall-visible NLoS surface and the shadow part by testing triangle
centroids for visibility against the hull itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRIANGLE_TABLE
from .bvh import build_bvh, closest_hit_batch, segments_blocked
from .geometry import TriangleMesh
from .occlusion import global_from_bits, label_set
from .scene import HiddenCube, WallScanGrid

_TRI_TABLE = np.full((256, 16), -1, dtype=np.int64)
for _case, _row in enumerate(TRIANGLE_TABLE):
    _TRI_TABLE[_case, :len(_row)] = _row
_CORNERS = np.array(CORNER_OFFSETS, dtype=np.int64)
_EDGES = np.array(EDGE_CORNERS, dtype=np.int64)


@dataclass
class FieldGrid:
    values: np.ndarray
    cube: HiddenCube

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError("grid must be cubic")
        if v.shape[0] < 8:
            raise ValueError("grid resolution must be at least 8")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        self.values = v

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def cell_size(self) -> float:
        return self.cube.side / self.resolution


def cell_centers(resolution: int, cube: HiddenCube) -> np.ndarray:
    """(r^3, 3) world positions of cell centers in C order (x slowest)."""
    c = (np.arange(resolution) + 0.5) / resolution
    g = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
    return cube.from_unit(g)


def evaluate_grid(source, resolution: int, cube: HiddenCube | None = None, *,
                  sensors=None, k: int = 1, transient=None) -> FieldGrid:
    """Sample a fitted field (probabilities) or an oracle BVH (hard labels).

    ``source`` is an OcclusionField, a Bvh (needs ``sensors``) or ``None``
    for an empty scene.
    """
    from .field import OcclusionField

    if isinstance(source, OcclusionField):
        cube = cube or source.cube
        vals = source.predict(cell_centers(resolution, cube), transient)
    else:
        if cube is None or sensors is None:
            raise ValueError("oracle grids need a cube and sensors")
        vals = label_set(source, cell_centers(resolution, cube), sensors, k).global_label
    return FieldGrid(np.asarray(vals, dtype=np.float64).reshape((resolution,) * 3), cube)


def marching_cubes(grid: FieldGrid, iso: float = 0.5) -> TriangleMesh:
    """Iso-surface of the zero-padded grid with outward normals (towards lower values)."""
    v = np.pad(grid.values, 1, constant_values=0.0)
    n = v.shape[0]
    inside = v >= iso
    # Case index per cube; bit i set when corner i is below the iso-level.
    case = np.zeros((n - 1,) * 3, dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        below = ~inside[dx:n - 1 + dx, dy:n - 1 + dy, dz:n - 1 + dz]
        case |= below.astype(np.int64) << bit
    cubes = np.argwhere((case != 0) & (case != 255))
    if len(cubes) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    rows = _TRI_TABLE[case[tuple(cubes.T)]]
    cube_idx, slot = np.nonzero(rows >= 0)
    edge = rows[cube_idx, slot]
    # Global edge key: (lower corner linear index) * 3 + axis.
    c0 = cubes[cube_idx] + _CORNERS[_EDGES[edge, 0]]
    c1 = cubes[cube_idx] + _CORNERS[_EDGES[edge, 1]]
    lower = np.minimum(c0, c1)
    axis = np.argmax(np.abs(c1 - c0), axis=1)
    key = (np.ravel_multi_index(tuple(lower.T), v.shape)) * 3 + axis
    uniq, vert_idx = np.unique(key, return_inverse=True)
    lin, ax = np.divmod(uniq, 3)
    a = np.stack(np.unravel_index(lin, v.shape), axis=1)
    b = a.copy()
    b[np.arange(len(b)), ax] += 1
    va = v[tuple(a.T)]
    vb = v[tuple(b.T)]
    t = (iso - va) / (vb - va)
    t = np.where(t < 1e-7, 0.0, np.where(t > 1.0 - 1e-7, 1.0, t))
    pos = a + t[:, None] * (b - a)
    # Padded index i is cell i - 1, whose center sits at (i - 0.5) cells.
    # Values exactly at the iso-level put several edge vertices on one grid
    # point; merge them (positions are bitwise equal) to keep the hull manifold.
    pos, merged = np.unique(pos, axis=0, return_inverse=True)
    tris = merged.reshape(-1)[vert_idx].reshape(-1, 3)
    verts = grid.cube.lo + (pos - 0.5) * grid.cell_size
    return TriangleMesh(verts, tris)


def fill_enclosed(grid: FieldGrid, iso: float = 0.5) -> FieldGrid:
    """Mark free pockets fully enclosed by occluded cells as occluded.

    No ray from the wall can reach such a pocket, so by definition its
    points are occluded; a fitted field may still leave small bubbles there.
    Cube faces count as open, matching the zero padding of marching cubes.
    """
    occ = np.pad(grid.values >= iso, 1, constant_values=False)
    holes = ndimage.binary_fill_holes(occ)[1:-1, 1:-1, 1:-1] & ~(grid.values >= iso)
    if not holes.any():
        return grid
    v = grid.values.copy()
    v[holes] = 1.0
    return FieldGrid(v, grid.cube)


def interpolate_grid(grid: FieldGrid, points) -> np.ndarray:
    """Trilinear interpolation on the zero-padded grid (cell-center samples)."""
    v = np.pad(grid.values, 1, constant_values=0.0)
    x = (np.asarray(points).reshape(-1, 3) - grid.cube.lo) / grid.cell_size + 0.5
    i0 = np.clip(np.floor(x).astype(np.int64), 0, v.shape[0] - 2)
    f = x - i0
    out = np.zeros(len(x))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]) * (f[:, 2] if dz else 1 - f[:, 2])
                out += w * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


@dataclass
class ExtractedSurface:
    closed_mesh: TriangleMesh
    nlos_mesh: TriangleMesh
    nlos_mask: np.ndarray

    @property
    def shadow_mesh(self) -> TriangleMesh:
        return self.closed_mesh.submesh(~self.nlos_mask)


SEGMENT_DEPTH = 0.5
SEGMENT_SKIP = 1.5
MIN_ISLAND = 0.02


def triangle_components(mesh: TriangleMesh) -> np.ndarray:
    """Connected-component label per triangle (triangles sharing a vertex are connected)."""
    t = mesh.triangles
    n = len(mesh.vertices)
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    adj = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels[t[:, 0]]


def segment_nlos_surface(closed: TriangleMesh, sensors, k: int = 1,
                         cell_size: float | None = None, depth: float = SEGMENT_DEPTH,
                         skip: float = SEGMENT_SKIP, min_facing: float = 0.0,
                         min_island: float = MIN_ISLAND) -> ExtractedSurface:
    """Keep triangles whose centroid is globally visible w.r.t. the hull itself.

    A centroid lying exactly on the hull is ambiguous, so each one is pushed
    ``depth`` cells into the hull and hull crossings closer than ``skip``
    cells are ignored: the facet's own neighbourhood is transparent while
    every other part of the hull still blocks. A sensor only counts when
    the outward normal faces it (cosine above ``min_facing``). Lateral
    shadow interfaces then come out occluded, since the object that casts
    them lies between them and the wall.

    Fitted fields leave the far shadow boundary uncertain by about the
    training-point spacing, which shows up as a dust of tiny "visible"
    patches there. Kept connected pieces smaller than ``min_island`` of the
    kept area are therefore dropped (0 disables this). ``cell_size``
    defaults to the mean edge length.
    """
    sensors = np.asarray(sensors, dtype=np.float64).reshape(-1, 3)
    if len(closed) == 0:
        return ExtractedSurface(closed, closed, np.zeros(0, dtype=bool))
    if cell_size is None:
        c = closed.corners
        cell_size = float(np.linalg.norm(c[:, 1] - c[:, 0], axis=1).mean())
    origins = closed.centroids - depth * cell_size * closed.normals
    blocked = segments_blocked(build_bvh(closed), origins, sensors, t_min=skip * cell_size)
    to_sensor = sensors[None, :, :] - closed.centroids[:, None, :]
    to_sensor /= np.linalg.norm(to_sensor, axis=2, keepdims=True)
    blocked |= np.einsum("nd,nsd->ns", closed.normals, to_sensor) <= min_facing
    visible = global_from_bits(blocked, k) == 0
    if min_island > 0 and visible.any():
        kept = closed.submesh(visible)
        comp = triangle_components(kept)
        area = np.bincount(comp, weights=kept.areas)
        idx = np.nonzero(visible)[0]
        visible[idx[area[comp] < min_island * area.sum()]] = False
    return ExtractedSurface(closed, closed.submesh(visible), visible)


def wall_visible_faces(mesh: TriangleMesh, sensors, k: int = 1) -> TriangleMesh:
    """Ground-truth triangles whose centroid is globally visible against the mesh."""
    offset = 1e-4 * float(np.ptp(mesh.vertices, axis=0).max())
    origins = mesh.centroids
    normals = mesh.normals
    # Test both sides of the (possibly open) surface and keep the better one.
    vis = np.zeros(len(mesh), dtype=bool)
    bvh = build_bvh(mesh)
    for sign in (1.0, -1.0):
        bits = segments_blocked(bvh, origins + sign * offset * normals, sensors)
        vis |= global_from_bits(bits, k) == 0
    return mesh.submesh(vis)


def fermat_filter(mesh: TriangleMesh, wall: WallScanGrid) -> TriangleMesh:
    """Best-Fermat-case filter: keep triangles whose normal ray reaches the scan area.

    The ray starts at the centroid along the triangle normal; it must cross
    the wall plane inside the scanned rectangle without hitting the mesh.
    """
    return mesh.submesh(fermat_mask(mesh, wall))


def fermat_mask(mesh: TriangleMesh, wall: WallScanGrid) -> np.ndarray:
    if len(mesh) == 0:
        return np.zeros(0, dtype=bool)
    n = mesh.normals
    c = mesh.centroids
    toward = n[:, 2] < -1e-12
    keep = np.zeros(len(mesh), dtype=bool)
    if not toward.any():
        return keep
    idx = np.nonzero(toward)[0]
    t_wall = -c[idx, 2] / n[idx, 2]
    hit = c[idx] + t_wall[:, None] * n[idx]
    on_aperture = wall.contains(hit)
    ts, _, _ = closest_hit_batch(build_bvh(mesh), c[idx], n[idx], t_wall)
    keep[idx] = on_aperture & ~np.isfinite(ts)
    return keep


def extract_surface(grid: FieldGrid, sensors, k: int = 1, iso: float = 0.5,
                    fill: bool = True) -> ExtractedSurface:
    """Enclosed-pocket fill, marching cubes and NLoS segmentation in one call."""
    if fill:
        grid = fill_enclosed(grid, iso)
    return segment_nlos_surface(marching_cubes(grid, iso), sensors, k, cell_size=grid.cell_size)
