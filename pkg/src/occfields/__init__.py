"""Occlusion fields for confocal non-line-of-sight reconstruction."""

from .bvh import Bvh, any_hit, build_bvh, closest_hit, segments_blocked
from .field import FitConfig, FitDivergence, FitReport, OcclusionField, PositionalEncoding, fit
from .geometry import AffineTransform, GeometryError, Ray, TriangleMesh, load_mesh, save_mesh
from .metrics import EvalReport, chamfer, evaluate, fscore, label_iou
from .noise import add_spad_noise
from .occlusion import (
    OcclusionSampleSet, global_occlusion, label_set, labeling_sensors, local_occlusion, sample_points,
)
from .scene import (
    HiddenCube, PlacementRanges, SceneConfig, ScenePlacement, WallScanGrid, build_scene, preset,
    sample_placement,
)
from .surface import (
    ExtractedSurface, FieldGrid, evaluate_grid, extract_surface, fermat_filter, fill_enclosed,
    marching_cubes, segment_nlos_surface, wall_visible_faces,
)
from .transient import TransientVolume, render

__version__ = "0.1.0"
