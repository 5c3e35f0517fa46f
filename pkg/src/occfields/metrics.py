"""Evaluation metrics in unit-cube coordinates.

Chamfer is the symmetric mean of squared nearest-neighbour distances
between area-uniform surface samples, averaged over both directions; it is
reported raw and multiplied by 1e3. Both meshes are sampled with generators
seeded identically, so a mesh compared with itself gives exactly zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import TriangleMesh
from .scene import HiddenCube

DEFAULT_SAMPLES = 10_000
DEFAULT_TAU = 0.01


def _to_unit(mesh: TriangleMesh, cube: HiddenCube | None) -> TriangleMesh:
    if len(mesh) == 0:
        raise ValueError("empty mesh")
    return mesh if cube is None else cube.mesh_to_unit(mesh)


def _samples(mesh: TriangleMesh, n: int, seed: int) -> np.ndarray:
    pts, _ = mesh.sample_surface(n, np.random.default_rng(seed))
    return pts


def _nn_dist(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def chamfer(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_samples: int = DEFAULT_SAMPLES,
            seed: int = 0, cube: HiddenCube | None = None) -> float:
    """Symmetric mean squared nearest-neighbour distance (raw units).

    With ``cube`` the meshes are world meshes and are mapped to [0, 1]^3 first.
    """
    a = _samples(_to_unit(mesh_a, cube), n_samples, seed)
    b = _samples(_to_unit(mesh_b, cube), n_samples, seed)
    return 0.5 * float(np.mean(_nn_dist(a, b) ** 2) + np.mean(_nn_dist(b, a) ** 2))


def precision_recall(mesh_pred: TriangleMesh, mesh_gt: TriangleMesh, tau: float = DEFAULT_TAU,
                     n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                     cube: HiddenCube | None = None) -> tuple[float, float]:
    p = _samples(_to_unit(mesh_pred, cube), n_samples, seed)
    g = _samples(_to_unit(mesh_gt, cube), n_samples, seed)
    return float(np.mean(_nn_dist(p, g) <= tau)), float(np.mean(_nn_dist(g, p) <= tau))


def fscore(mesh_pred: TriangleMesh, mesh_gt: TriangleMesh, tau: float = DEFAULT_TAU,
           n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
           cube: HiddenCube | None = None) -> float:
    """Harmonic mean of precision and recall at distance ``tau``."""
    prec, rec = precision_recall(mesh_pred, mesh_gt, tau, n_samples, seed, cube)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def label_iou(pred, gt) -> float:
    pred = np.asarray(pred).astype(bool).ravel()
    gt = np.asarray(gt).astype(bool).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"label length mismatch: {pred.size} vs {gt.size}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass
class EvalReport:
    chamfer_x1e3: float | None = None
    iou: float | None = None
    fscore: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("chamfer_x1e3", "iou", "fscore"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"{name} is not finite")
        for name in ("iou", "fscore"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chamfer_convention"] = "symmetric mean squared NN distance, unit cube, x1e3"
        return d


def evaluate(mesh_pred: TriangleMesh | None = None, mesh_gt: TriangleMesh | None = None,
             labels_pred=None, labels_gt=None, tau: float = DEFAULT_TAU,
             n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
             cube: HiddenCube | None = None) -> EvalReport:
    """Whatever metrics the given inputs allow."""
    report = EvalReport(config={"n_samples": n_samples, "tau": tau, "seed": seed})
    if mesh_pred is not None and mesh_gt is not None:
        report.chamfer_x1e3 = 1e3 * chamfer(mesh_pred, mesh_gt, n_samples, seed, cube)
        report.fscore = fscore(mesh_pred, mesh_gt, tau, n_samples, seed, cube)
    if labels_pred is not None and labels_gt is not None:
        report.iou = label_iou(labels_pred, labels_gt)
    report.__post_init__()
    return report
