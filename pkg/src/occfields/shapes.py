"""Procedural fixture meshes: quads, plates, boxes, spheres and block letters.

Closed shapes are wound counter-clockwise seen from outside, so face normals
point outward.
"""

from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh, merge_meshes


def quad(center=(0.0, 0.0, 0.0), size=(1.0, 1.0), normal_axis: int = 2,
         facing: int = -1, subdivisions: int = 1) -> TriangleMesh:
    """Axis-aligned rectangle subdivided into a grid of triangle pairs.

    ``facing`` is the sign of the normal along ``normal_axis``.
    """
    n = subdivisions
    u = np.linspace(-0.5, 0.5, n + 1) * size[0]
    v = np.linspace(-0.5, 0.5, n + 1) * size[1]
    uu, vv = np.meshgrid(u, v, indexing="ij")
    a1, a2 = [a for a in range(3) if a != normal_axis]
    verts = np.zeros(((n + 1) ** 2, 3))
    verts[:, a1] = uu.ravel()
    verts[:, a2] = vv.ravel()
    verts += np.asarray(center, dtype=np.float64)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    mesh = TriangleMesh(verts, tris)
    if np.sign(mesh.normals[0, normal_axis]) != np.sign(facing):
        mesh = TriangleMesh(verts, tris[:, ::-1])
    return mesh


def box(lo, hi, subdivisions: int = 1) -> TriangleMesh:
    """Closed axis-aligned box with outward normals."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    center = 0.5 * (lo + hi)
    size = hi - lo
    faces = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for sign in (-1, 1):
            c = center.copy()
            c[axis] = lo[axis] if sign < 0 else hi[axis]
            faces.append(quad(c, (size[others[0]], size[others[1]]), axis, sign, subdivisions))
    return weld(merge_meshes(faces))


def plate(width: float = 1.0, thickness: float = 0.04, subdivisions: int = 8) -> TriangleMesh:
    """Thin closed slab centered at the origin, broad faces normal to z."""
    h = 0.5 * width
    return box((-h, -h, -0.5 * thickness), (h, h, 0.5 * thickness), subdivisions)


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere obtained by subdividing an icosahedron."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.array(faces))


def weld(mesh: TriangleMesh, decimals: int = 9) -> TriangleMesh:
    """Merge coincident vertices."""
    key = np.round(mesh.vertices, decimals)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    return TriangleMesh(uniq, inverse.reshape(-1)[mesh.triangles], mesh.albedo)


# Block letters on a 3x5 cell grid, rows listed top to bottom.
_GLYPHS = {
    "T": ["###", ".#.", ".#.", ".#.", ".#."],
    "L": ["#..", "#..", "#..", "#..", "###"],
    "H": ["#.#", "#.#", "###", "#.#", "#.#"],
    "E": ["###", "#..", "###", "#..", "###"],
    "F": ["###", "#..", "###", "#..", "#.."],
    "I": ["###", ".#.", ".#.", ".#.", "###"],
}


def letter(char: str, height: float = 1.0, depth: float = 0.2, subdivisions: int = 2) -> TriangleMesh:
    """Extruded block letter centered at the origin, extruded along z.

    Each filled glyph cell is a separate closed box.
    """
    rows = _GLYPHS[char.upper()]
    cell = height / len(rows)
    width = cell * len(rows[0])
    parts = []
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            if ch != "#":
                continue
            x0 = -0.5 * width + c * cell
            y1 = 0.5 * height - r * cell
            parts.append(box((x0, y1 - cell, -0.5 * depth), (x0 + cell, y1, 0.5 * depth), subdivisions))
    return merge_meshes(parts)


def sphere_indicator(resolution: int, radius: float = 0.3, center=(0.5, 0.5, 0.5),
                     supersample: int = 4) -> np.ndarray:
    """Cell-averaged indicator of a ball on a regular grid over the unit cube.

    Each value is the fraction of ``supersample**3`` sub-cell points inside
    the ball.
    """
    return _cell_average(resolution, supersample,
                         lambda p: np.linalg.norm(p - np.asarray(center), axis=-1) < radius)


def box_indicator(resolution: int, lo, hi, supersample: int = 4) -> np.ndarray:
    """Cell-averaged indicator of an axis-aligned box over the unit cube."""
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    return _cell_average(resolution, supersample,
                         lambda p: np.all((p > lo) & (p < hi), axis=-1))


def _cell_average(resolution, supersample, inside):
    r, s = resolution, supersample
    sub = (np.arange(r * s) + 0.5) / (r * s)
    out = np.zeros((r, r, r))
    # Slab by slab along x to bound memory.
    for i in range(r):
        xs = sub[i * s:(i + 1) * s]
        p = np.stack(np.meshgrid(xs, sub, sub, indexing="ij"), axis=-1)
        occ = inside(p).astype(np.float64)
        out[i] = occ.reshape(s, r, s, r, s).mean(axis=(0, 2, 4))
    return out


BUILTIN_NAMES = ("plate", "sphere") + tuple(f"letter-{c}" for c in _GLYPHS)


def builtin_mesh(name: str) -> TriangleMesh:
    """Procedural meshes usable as mesh ids when no mesh directory is given."""
    if name == "plate":
        return plate(subdivisions=16)
    if name == "sphere":
        return icosphere(0.5, 4)
    if name.startswith("letter-") and name[7:] in _GLYPHS:
        return letter(name[7:], subdivisions=4)
    raise KeyError(f"unknown built-in mesh {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
