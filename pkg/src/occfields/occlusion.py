"""Ground-truth occlusion labels.

A point is locally occluded for a sensor when the open segment between
them crosses the scene mesh. Globally, a point is visible (label 0) when at
least ``k`` sensors see it; with k = 1 this is the product of the local
occlusion bits over all sensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bvh import Bvh, any_hit, segments_blocked
from .geometry import Ray, TriangleMesh
from .scene import HiddenCube, WallScanGrid

DEFAULT_SENSOR_GRID = 5
DEFAULT_N_POINTS = 400_000
DEFAULT_SURFACE_FRACTION = 0.7
DEFAULT_VARIANCE_RANGE = (0.001, 0.005)


def labeling_sensors(wall: WallScanGrid, n: int | None = DEFAULT_SENSOR_GRID) -> np.ndarray:
    """Sensor positions for labeling; ``n=None`` uses the full scan grid."""
    return wall.positions if n is None else wall.subgrid(n).positions


def local_occlusion(bvh: Bvh | None, p, s) -> int:
    """1 iff the segment p -> s is blocked by the mesh."""
    if bvh is None:
        return 0
    return int(any_hit(bvh, Ray.between(p, s)))


def occlusion_bits(bvh: Bvh | None, points, sensors) -> np.ndarray:
    """(n, N) boolean matrix of local occlusion bits."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    sensors = np.asarray(sensors, dtype=np.float64).reshape(-1, 3)
    if bvh is None:
        return np.zeros((len(points), len(sensors)), dtype=bool)
    return segments_blocked(bvh, points, sensors)


def global_from_bits(bits: np.ndarray, k: int = 1) -> np.ndarray:
    """Global label per row: occluded (1) iff fewer than k sensors see the point."""
    bits = np.asarray(bits, dtype=bool)
    n_sensors = bits.shape[-1]
    if not 1 <= k <= n_sensors:
        raise ValueError(f"k must lie in [1, {n_sensors}], got {k}")
    return (bits.sum(axis=-1) > n_sensors - k).astype(np.uint8)


def global_occlusion(bvh: Bvh | None, p, sensors, k: int = 1) -> int:
    sensors = np.asarray(sensors, dtype=np.float64).reshape(-1, 3)
    if len(sensors) == 0:
        raise ValueError("no sensors")
    return int(global_from_bits(occlusion_bits(bvh, p, sensors), k)[0])


def sample_points(mesh: TriangleMesh | None, cube: HiddenCube, n_total: int = DEFAULT_N_POINTS,
                  surface_fraction: float = DEFAULT_SURFACE_FRACTION,
                  variance_range=DEFAULT_VARIANCE_RANGE, rng=None) -> np.ndarray:
    """Training points: perturbed surface samples plus uniform cube samples.

    Perturbation variances are drawn per point from ``variance_range`` in
    cube-side units and the perturbed points are clamped to the cube.
    """
    rng = np.random.default_rng(rng)
    n_surf = int(round(n_total * surface_fraction)) if mesh is not None and len(mesh) else 0
    parts = []
    if n_surf:
        pts, _ = mesh.sample_surface(n_surf, rng)
        var = rng.uniform(variance_range[0], variance_range[1], n_surf)
        sigma = np.sqrt(var) * cube.side
        pts = pts + rng.normal(size=(n_surf, 3)) * sigma[:, None]
        parts.append(np.clip(pts, cube.lo, cube.hi))
    parts.append(rng.uniform(cube.lo, cube.hi, size=(n_total - n_surf, 3)))
    return np.concatenate(parts)


@dataclass
class OcclusionSampleSet:
    points: np.ndarray
    per_sensor_bits: np.ndarray
    global_label: np.ndarray
    k: int = 1
    sensors: np.ndarray | None = None

    @property
    def sensor_count(self) -> int:
        return self.per_sensor_bits.shape[1]

    def __len__(self):
        return len(self.points)

    def relabel(self, k: int) -> "OcclusionSampleSet":
        return OcclusionSampleSet(self.points, self.per_sensor_bits,
                                  global_from_bits(self.per_sensor_bits, k), k, self.sensors)

    def subset(self, idx) -> "OcclusionSampleSet":
        return OcclusionSampleSet(self.points[idx], self.per_sensor_bits[idx],
                                  self.global_label[idx], self.k, self.sensors)

    def _record_dtype(self):
        nbytes = (self.sensor_count + 7) // 8
        return np.dtype([("xyz", "<f4", (3,)), ("label", "u1"), ("bits", "u1", (nbytes,))])

    def save(self, path) -> None:
        """Packed little-endian records plus a JSON sidecar."""
        rec = np.empty(len(self), dtype=self._record_dtype())
        rec["xyz"] = self.points
        rec["label"] = self.global_label
        rec["bits"] = np.packbits(self.per_sensor_bits, axis=1, bitorder="little")
        Path(path).write_bytes(rec.tobytes())
        meta = {"count": len(self), "sensors": self.sensor_count, "k": self.k}
        if self.sensors is not None:
            meta["sensor_positions"] = np.asarray(self.sensors).tolist()
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "OcclusionSampleSet":
        meta = json.loads(Path(str(path) + ".json").read_text())
        n_sensors = int(meta["sensors"])
        nbytes = (n_sensors + 7) // 8
        dt = np.dtype([("xyz", "<f4", (3,)), ("label", "u1"), ("bits", "u1", (nbytes,))])
        rec = np.frombuffer(Path(path).read_bytes(), dtype=dt)
        if len(rec) != meta["count"]:
            raise ValueError("sample count does not match header")
        bits = np.unpackbits(rec["bits"], axis=1, count=n_sensors, bitorder="little").astype(bool)
        sensors = np.array(meta["sensor_positions"]) if "sensor_positions" in meta else None
        return cls(rec["xyz"].astype(np.float64), bits, rec["label"].copy(), int(meta["k"]), sensors)


def label_set(bvh: Bvh | None, points, sensors, k: int = 1) -> OcclusionSampleSet:
    """Per-sensor bits and global labels for every point, in input order."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    sensors = np.asarray(sensors, dtype=np.float64).reshape(-1, 3)
    bits = occlusion_bits(bvh, points, sensors)
    return OcclusionSampleSet(points, bits, global_from_bits(bits, k), k, sensors)
