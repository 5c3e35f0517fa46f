import numpy as np
import pytest

from occfields.geometry import AffineTransform
from occfields.occlusion import labeling_sensors
from occfields.scene import ScenePlacement, build_scene, preset
from occfields.shapes import builtin_mesh

PLATE = [("plate", AffineTransform(0.7))]
SPHERE = [("sphere", AffineTransform(0.6))]
# The T sits in front and shadows part of the L behind it.
LETTERS = [
    ("letter-T", AffineTransform(0.45, (0.0, 0.0, 0.0), (-0.2, 0.0, -0.15))),
    ("letter-L", AffineTransform(0.45, (0.0, 0.0, 0.0), (0.15, 0.05, 0.2))),
]
TILTED_PLATE = [("plate", AffineTransform(0.7, (10.0, 20.0, 10.0), (0.1, 0.0, 0.1)))]
PLATE_AND_SPHERE = [
    ("plate", AffineTransform(0.4, (0.0, 0.0, 0.0), (-0.2, 0.1, -0.25))),
    ("sphere", AffineTransform(0.35, (0.0, 0.0, 0.0), (0.15, -0.1, 0.25))),
]


def make_scene(placements, name="confocal-small"):
    cfg = preset(name)
    mesh, bvh = build_scene(cfg, [ScenePlacement(m, xf) for m, xf in placements], builtin_mesh)
    return cfg, mesh, bvh


@pytest.fixture(scope="session")
def small():
    return preset("confocal-small")


@pytest.fixture(scope="session")
def sensors(small):
    return labeling_sensors(small.wall)


@pytest.fixture(scope="session")
def plate_scene():
    return make_scene(PLATE)


@pytest.fixture(scope="session")
def sphere_scene():
    return make_scene(SPHERE)


@pytest.fixture(scope="session")
def letters_scene():
    return make_scene(LETTERS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
