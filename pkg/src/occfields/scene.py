"""Scene assembly: relay-wall scan grid, hidden volume and randomized placement.

World frame: the relay wall is the plane z = 0 with normal +z, +y is up and
the hidden cube sits in front of the wall at z in [z_near, z_near + side].
Distances are in meters. Source meshes are normalized to a unit bounding
box and placed in the cube's centered frame [-0.5, 0.5]^3 before being
mapped to world coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bvh import Bvh, build_bvh
from .geometry import (
    AffineTransform, GeometryError, TriangleMesh, apply_transform, load_mesh,
    merge_meshes, normalize_mesh,
)

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class WallScanGrid:
    """Regular grid of scan positions at cell centers on the plane z = 0."""

    extent: tuple[float, float] = (0.7, 0.7)
    resolution: tuple[int, int] = (32, 32)

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.extent, dtype=np.float64) / np.asarray(self.resolution)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        (w, h), (nx, ny) = self.extent, self.resolution
        xs = -0.5 * w + (np.arange(nx) + 0.5) * w / nx
        ys = -0.5 * h + (np.arange(ny) + 0.5) * h / ny
        return xs, ys

    @property
    def positions(self) -> np.ndarray:
        """(n_x * n_y, 3) positions, x-major: index = ix * n_y + iy."""
        xs, ys = self.axes()
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)

    def subgrid(self, nx: int, ny: int | None = None) -> "WallScanGrid":
        """Coarser grid over the same wall area (e.g. 5x5 labeling sensors)."""
        return WallScanGrid(self.extent, (nx, nx if ny is None else ny))

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        """Whether wall-plane points fall inside the scanned rectangle."""
        p = np.asarray(points).reshape(-1, 3)
        hw, hh = 0.5 * self.extent[0], 0.5 * self.extent[1]
        return (np.abs(p[:, 0]) <= hw + tol) & (np.abs(p[:, 1]) <= hh + tol)


@dataclass(frozen=True)
class HiddenCube:
    """Axis-aligned cube in front of the wall."""

    side: float = 0.5
    z_near: float = 0.1

    @property
    def center(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.z_near + 0.5 * self.side])

    @property
    def lo(self) -> np.ndarray:
        return self.center - 0.5 * self.side

    @property
    def hi(self) -> np.ndarray:
        return self.center + 0.5 * self.side

    def to_unit(self, points) -> np.ndarray:
        """World -> cube-local [0, 1]^3."""
        return (np.asarray(points) - self.lo) / self.side

    def from_unit(self, points) -> np.ndarray:
        return np.asarray(points) * self.side + self.lo

    def from_centered(self, points) -> np.ndarray:
        """Centered frame [-0.5, 0.5]^3 -> world."""
        return np.asarray(points) * self.side + self.center

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        p = np.asarray(points).reshape(-1, 3)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=1)

    def mesh_to_unit(self, mesh: TriangleMesh) -> TriangleMesh:
        return TriangleMesh(self.to_unit(mesh.vertices), mesh.triangles, mesh.albedo)


@dataclass(frozen=True)
class SceneConfig:
    wall: WallScanGrid = field(default_factory=WallScanGrid)
    bin_width_ps: float = 32.0
    n_bins: int = 256
    hidden_cube: HiddenCube = field(default_factory=HiddenCube)
    material: str = "diffuse"
    seed: int = 0
    preset: str = "custom"

    def __post_init__(self):
        if self.material not in ("diffuse", "retroreflective"):
            raise ValueError(f"unknown material {self.material!r}")

    @property
    def bin_width_s(self) -> float:
        return self.bin_width_ps * 1e-12

    @property
    def max_range(self) -> float:
        """Largest one-way distance the histogram can record."""
        return self.n_bins * self.bin_width_s * SPEED_OF_LIGHT / 2.0

    def max_path_distance(self) -> float:
        """Largest wall-to-cube distance over all scan positions and cube corners."""
        hw, hh = 0.5 * self.wall.extent[0], 0.5 * self.wall.extent[1]
        lo, hi = self.hidden_cube.lo, self.hidden_cube.hi
        dx = max(abs(lo[0]) + hw, abs(hi[0]) + hw)
        dy = max(abs(lo[1]) + hh, abs(hi[1]) + hh)
        return float(np.sqrt(dx * dx + dy * dy + hi[2] ** 2))

    def check(self) -> None:
        if self.max_path_distance() > self.max_range:
            raise ValueError("histogram too short for the hidden volume")

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "wall_extent_m": list(self.wall.extent),
            "wall_resolution": list(self.wall.resolution),
            "bin_ps": self.bin_width_ps,
            "n_bins": self.n_bins,
            "cube_side_m": self.hidden_cube.side,
            "cube_z_near_m": self.hidden_cube.z_near,
            "material": self.material,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(
            wall=WallScanGrid(tuple(d["wall_extent_m"]), tuple(d["wall_resolution"])),
            bin_width_ps=float(d["bin_ps"]),
            n_bins=int(d["n_bins"]),
            hidden_cube=HiddenCube(float(d["cube_side_m"]), float(d["cube_z_near_m"])),
            material=d.get("material", "diffuse"),
            seed=int(d.get("seed", 0)),
            preset=d.get("preset", "custom"),
        )


# 70 cm wall at 32 ps with targets centered 35 cm from the wall; 2 m wall at 64 ps.
PRESETS = {
    "confocal-small": SceneConfig(
        WallScanGrid((0.7, 0.7), (32, 32)), 32.0, 256, HiddenCube(0.5, 0.1),
        preset="confocal-small",
    ),
    "confocal-large": SceneConfig(
        WallScanGrid((2.0, 2.0), (32, 32)), 64.0, 256, HiddenCube(1.0, 0.2),
        preset="confocal-large",
    ),
}


def preset(name: str, **overrides) -> SceneConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class PlacementRanges:
    """Sampling ranges for random affine placement (degrees for rotations)."""

    scale: tuple[float, float] = (0.6, 0.85)
    rot_x: tuple[float, float] = (0.0, 10.0)
    rot_y: tuple[float, float] = (0.0, 20.0)
    rot_z: tuple[float, float] = (0.0, 10.0)
    trans_x: tuple[float, float] = (-0.30, 0.30)
    trans_y: tuple[float, float] = (-0.30, 0.30)
    trans_z: tuple[float, float] = (-0.40, 0.40)

    @classmethod
    def fixed(cls, scale=0.7, rot=(0.0, 0.0, 0.0), trans=(0.0, 0.0, 0.0)) -> "PlacementRanges":
        return cls((scale, scale), (rot[0],) * 2, (rot[1],) * 2, (rot[2],) * 2,
                   (trans[0],) * 2, (trans[1],) * 2, (trans[2],) * 2)


@dataclass(frozen=True)
class ScenePlacement:
    source_mesh_id: str
    transform: AffineTransform


MAX_PLACEMENT_ATTEMPTS = 100


def _draw(rng, r):
    lo, hi = r
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_placement(rng: np.random.Generator, ranges: PlacementRanges = PlacementRanges(),
                     mesh: TriangleMesh | None = None) -> AffineTransform:
    """Draw a uniform random transform; with a mesh, resample until it fits the cube."""
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        xf = AffineTransform(
            _draw(rng, ranges.scale),
            (_draw(rng, ranges.rot_x), _draw(rng, ranges.rot_y), _draw(rng, ranges.rot_z)),
            (_draw(rng, ranges.trans_x), _draw(rng, ranges.trans_y), _draw(rng, ranges.trans_z)),
        )
        if mesh is None:
            return xf
        try:
            apply_transform(mesh, xf)
        except GeometryError:
            continue
        return xf
    raise GeometryError("unplaceable mesh")


def place_mesh(mesh: TriangleMesh, xf: AffineTransform, cube: HiddenCube) -> TriangleMesh:
    """Normalize, transform in the centered frame and map into world coordinates."""
    local = apply_transform(normalize_mesh(mesh), xf)
    return TriangleMesh(cube.from_centered(local.vertices), local.triangles, local.albedo)


def build_scene(config: SceneConfig, placements, mesh_library) -> tuple[TriangleMesh, Bvh]:
    """Union of all placed source meshes plus its BVH.

    ``mesh_library`` maps mesh ids to TriangleMesh objects (or is a callable).
    """
    placements = list(placements)
    if not placements:
        raise GeometryError("empty scene")
    lookup = mesh_library if callable(mesh_library) else mesh_library.__getitem__
    parts = [place_mesh(lookup(p.source_mesh_id), p.transform, config.hidden_cube) for p in placements]
    mesh = merge_meshes(parts)
    return mesh, build_bvh(mesh)


class MeshDirectory:
    """Lazy mesh library backed by a directory of OBJ/PLY files."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache = {}

    def ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.suffix.lower() in (".obj", ".ply"))

    def __getitem__(self, mesh_id: str) -> TriangleMesh:
        if mesh_id not in self._cache:
            self._cache[mesh_id] = load_mesh(self.root / mesh_id)
        return self._cache[mesh_id]


# ---------------------------------------------------------------------------
# Scene description files


def scene_to_dict(config: SceneConfig, placements) -> dict:
    return {
        "preset": config.preset,
        "seed": config.seed,
        "config": config.to_dict(),
        "placements": [{"mesh": p.source_mesh_id, **p.transform.to_dict()} for p in placements],
    }


def save_scene(path, config: SceneConfig, placements) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(config, placements), indent=2, sort_keys=True) + "\n")


def load_scene(path) -> tuple[SceneConfig, list[ScenePlacement]]:
    d = json.loads(Path(path).read_text())
    if "config" in d:
        config = SceneConfig.from_dict(d["config"])
    else:
        config = preset(d["preset"], seed=int(d.get("seed", 0)))
    placements = [ScenePlacement(p["mesh"], AffineTransform.from_dict(p)) for p in d["placements"]]
    return config, placements


def generate_scene(config: SceneConfig, mesh_ids, library, scene_index: int = 0,
                   objects: int = 1, ranges: PlacementRanges = PlacementRanges()) -> list[ScenePlacement]:
    """Random placements for one dataset scene; RNG stream seed = config.seed + scene_index."""
    rng = np.random.default_rng(config.seed + scene_index)
    mesh_ids = list(mesh_ids)
    out = []
    for _ in range(objects):
        mid = mesh_ids[int(rng.integers(len(mesh_ids)))]
        xf = sample_placement(rng, ranges, normalize_mesh(library[mid]))
        out.append(ScenePlacement(mid, xf))
    return out
