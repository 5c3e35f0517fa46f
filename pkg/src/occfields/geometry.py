"""Triangle meshes, rays, affine placement and mesh file I/O.

All geometry is stored as float64 numpy arrays. A mesh is treated as
immutable once constructed; operations return new meshes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEGENERATE_AREA = 1e-14


class GeometryError(ValueError):
    """Invalid or unusable geometry."""


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh with a scalar albedo per triangle.

    Construction drops zero-area triangles and validates indices. Normals
    follow the counter-clockwise winding (right-hand rule).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    albedo: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.albedo is None:
            a = np.ones(len(t))
        else:
            a = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), (len(t),)).copy()
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        if np.any((a < 0) | (a > 1)):
            raise GeometryError("albedo must lie in [0, 1]")
        if len(t):
            keep = _areas(v, t) > DEGENERATE_AREA
            t, a = t[keep], a[keep]
        v.setflags(write=False)
        t.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "albedo", a)

    def __len__(self):
        return len(self.triangles)

    @property
    def corners(self) -> np.ndarray:
        """(m, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    @property
    def areas(self) -> np.ndarray:
        return _areas(self.vertices, self.triangles)

    @property
    def normals(self) -> np.ndarray:
        c = self.corners
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        used = self.vertices[np.unique(self.triangles)] if len(self) else self.vertices
        return used.min(axis=0), used.max(axis=0)

    @property
    def surface_area(self) -> float:
        return float(self.areas.sum())

    def submesh(self, mask) -> "TriangleMesh":
        """Keep the triangles selected by a boolean mask or index array."""
        return TriangleMesh(self.vertices, self.triangles[mask], self.albedo[mask])

    def with_albedo(self, albedo) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles, albedo)

    def sample_surface(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-uniform surface samples. Returns (points, triangle ids)."""
        if len(self) == 0:
            raise GeometryError("empty geometry")
        areas = self.areas
        tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        c = self.corners[tri]
        pts = (
            (1.0 - r1)[:, None] * c[:, 0]
            + (r1 * (1.0 - r2))[:, None] * c[:, 1]
            + (r1 * r2)[:, None] * c[:, 2]
        )
        return pts, tri

    def transformed(self, matrix: np.ndarray) -> "TriangleMesh":
        """Apply a 4x4 homogeneous matrix to the vertices."""
        m = np.asarray(matrix, dtype=np.float64)
        v = self.vertices @ m[:3, :3].T + m[:3, 3]
        return TriangleMesh(v, self.triangles, self.albedo)


def _areas(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    c = v[t]
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


def merge_meshes(meshes) -> TriangleMesh:
    """Concatenate meshes into one, preserving triangle order."""
    meshes = list(meshes)
    if not meshes:
        raise GeometryError("empty geometry")
    verts, tris, alb = [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        alb.append(m.albedo)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris), np.concatenate(alb))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_max: float = np.inf

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(d)
        if norm == 0:
            raise GeometryError("zero ray direction")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d / norm)
        object.__setattr__(self, "t_max", float(self.t_max))

    @classmethod
    def between(cls, a, b) -> "Ray":
        """Segment ray from a towards b, bounded at b."""
        a = np.asarray(a, dtype=np.float64)
        d = np.asarray(b, dtype=np.float64) - a
        return cls(a, d, float(np.linalg.norm(d)))


@dataclass(frozen=True)
class AffineTransform:
    """Uniform scale, then X/Y/Z Euler rotation (degrees), then translation."""

    scale: float = 1.0
    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return (
            self.scale == 1.0
            and not any(self.rotation_deg)
            and not any(self.translation)
        )

    def rotation_matrix(self) -> np.ndarray:
        ax, ay, az = np.radians(self.rotation_deg)
        cx, sx = np.cos(ax), np.sin(ax)
        cy, sy = np.cos(ay), np.sin(ay)
        cz, sz = np.cos(az), np.sin(az)
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        # X applied first, Z last.
        return rz @ ry @ rx

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix() * self.scale
        m[:3, 3] = self.translation
        return m

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) * self.scale
        p = p @ self.rotation_matrix().T
        return p + np.asarray(self.translation, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "scale": float(self.scale),
            "rot_deg": [float(x) for x in self.rotation_deg],
            "trans": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform":
        """Inverse of ``to_dict``; omitted keys default to the identity."""
        return cls(float(d.get("scale", 1.0)),
                   tuple(float(x) for x in d.get("rot_deg", (0.0, 0.0, 0.0))),
                   tuple(float(x) for x in d.get("trans", (0.0, 0.0, 0.0))))


def normalize_mesh(mesh: TriangleMesh) -> TriangleMesh:
    """Center the bounding box at the origin and scale its longest side to 1."""
    if len(mesh) == 0:
        raise GeometryError("empty geometry")
    lo, hi = mesh.bounds
    extent = float((hi - lo).max())
    v = (mesh.vertices - 0.5 * (lo + hi)) / extent
    return TriangleMesh(v, mesh.triangles, mesh.albedo)


def apply_transform(mesh: TriangleMesh, xf: AffineTransform, bound: float = 0.5) -> TriangleMesh:
    """Place a normalized mesh inside the centered cube [-bound, bound]^3.

    Raises GeometryError("out of scene bounds") when the result escapes the
    cube, so callers can resample the transform.
    """
    if xf.is_identity:
        v = mesh.vertices.copy()
    else:
        v = xf.apply_points(mesh.vertices)
    used = v[np.unique(mesh.triangles)] if len(mesh) else v
    if used.size and np.abs(used).max() > bound + 1e-12:
        raise GeometryError("out of scene bounds")
    return TriangleMesh(v, mesh.triangles, mesh.albedo)


# ---------------------------------------------------------------------------
# File I/O


def load_obj(path) -> TriangleMesh:
    """Read v/f records of a Wavefront OBJ file; polygons are fan-triangulated."""
    path = Path(path)
    verts, tris = [], []
    with path.open() as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for j in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[j], idx[j + 1]))
    if not tris:
        raise GeometryError(f"no faces in {path}")
    return TriangleMesh(np.array(verts), np.array(tris))


def save_obj(mesh: TriangleMesh, path) -> None:
    with Path(path).open("w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a} {b} {c}\n")


def save_ply(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY with float32 vertices and int32 faces."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    faces = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with Path(path).open("wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        fh.write(faces.tobytes())


def load_ply(path) -> TriangleMesh:
    """Read the binary PLY layout written by save_ply."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise GeometryError("only binary little-endian PLY is supported")
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    v = np.frombuffer(data, dtype="<f4", count=3 * nv, offset=end).reshape(nv, 3)
    faces = np.frombuffer(
        data, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf, offset=end + 12 * nv
    )
    if nf and np.any(faces["n"] != 3):
        raise GeometryError("only triangle faces are supported")
    return TriangleMesh(v.astype(np.float64), faces["idx"].astype(np.int64))


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    if path.suffix.lower() == ".ply":
        return load_ply(path)
    return load_obj(path)


def save_mesh(mesh: TriangleMesh, path) -> None:
    if Path(path).suffix.lower() == ".ply":
        save_ply(mesh, path)
    else:
        save_obj(mesh, path)

