import numpy as np
import pytest

import oracles
from occfields import shapes
from occfields.geometry import TriangleMesh
from occfields.metrics import chamfer
from occfields.scene import HiddenCube, WallScanGrid
from occfields.surface import (
    SEGMENT_DEPTH, SEGMENT_SKIP, FieldGrid, evaluate_grid, extract_surface, fermat_filter, fermat_mask, fill_enclosed,
    interpolate_grid, marching_cubes, segment_nlos_surface, triangle_components,
    wall_visible_faces,
)

UNIT = HiddenCube(1.0, 0.0)  # unit-side cube, so grid units are unit-cube units
SPHERE_CENTER = UNIT.from_unit([0.5, 0.5, 0.5])
# Segmentation treats sight lines within asin(depth / skip) of the tangent
# plane as blocked (that is where shadow interfaces live), so visible
# fractions are bracketed by the caps with and without this elevation cut.
GRAZING = np.arcsin(SEGMENT_DEPTH / SEGMENT_SKIP)


def sphere_grid(r):
    return FieldGrid(shapes.sphere_indicator(r, 0.3), UNIT)


def edges_of(mesh):
    t = mesh.triangles
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    return np.unique(e, axis=0, return_counts=True)


@pytest.fixture(scope="module")
def sphere64():
    return marching_cubes(sphere_grid(64))


@pytest.fixture(scope="module")
def plate_oracle(plate_scene, sensors):
    cfg, mesh, bvh = plate_scene
    grid = evaluate_grid(bvh, 64, cfg.hidden_cube, sensors=sensors)
    return cfg, mesh, grid


def test_grid_validation():
    with pytest.raises(ValueError):
        FieldGrid(np.zeros((8, 8, 9)), UNIT)
    with pytest.raises(ValueError):
        FieldGrid(np.zeros((4, 4, 4)), UNIT)
    with pytest.raises(ValueError):
        FieldGrid(np.full((8, 8, 8), np.nan), UNIT)
    with pytest.raises(ValueError):
        evaluate_grid(None, 8)


def test_empty_scene_grid(small, sensors):
    g = evaluate_grid(None, 32, small.hidden_cube, sensors=sensors)
    assert g.values.shape == (32, 32, 32) and not g.values.any()
    assert len(marching_cubes(g)) == 0
    assert len(extract_surface(g, sensors).nlos_mesh) == 0


def test_sphere_vertices_on_radius(sphere64):
    r = np.linalg.norm(sphere64.vertices - SPHERE_CENTER, axis=1)
    assert np.all(np.abs(r - 0.3) <= 1.5 / 64)


def test_sphere_is_closed_genus_zero(sphere64):
    edges, counts = edges_of(sphere64)
    assert np.all(counts == 2)
    assert len(sphere64.vertices) - len(edges) + len(sphere64) == 2
    assert len(np.unique(triangle_components(sphere64))) == 1
    # Outward orientation: normals point away from the center.
    assert np.all(np.einsum("ij,ij->i", sphere64.normals, sphere64.centroids - SPHERE_CENTER) > 0)


def test_sphere_area_at_128():
    m = marching_cubes(sphere_grid(128))
    assert m.surface_area == pytest.approx(4 * np.pi * 0.3 ** 2, rel=0.05)


def test_box_area_at_128():
    m = marching_cubes(FieldGrid(shapes.box_indicator(128, (0.2, 0.3, 0.25), (0.7, 0.6, 0.8)), UNIT))
    a = 2 * (0.5 * 0.3 + 0.5 * 0.55 + 0.3 * 0.55)
    assert m.surface_area == pytest.approx(a, rel=0.05)


def test_constant_grids():
    assert len(marching_cubes(FieldGrid(np.zeros((16,) * 3), UNIT))) == 0
    # Full grid closes against the zero padding on the cube faces; each of the
    # 12 cube edges is bevelled over half a cell on both sides.
    full = marching_cubes(FieldGrid(np.ones((16,) * 3), UNIT))
    bevel = 12 * (1 - np.sqrt(0.5)) / 16
    assert full.surface_area == pytest.approx(6.0 - bevel, rel=0.005)
    assert np.all(edges_of(full)[1] == 2)


def test_iso_level_consistency():
    g = sphere_grid(32)
    m = marching_cubes(g)
    np.testing.assert_allclose(interpolate_grid(g, m.vertices), 0.5, atol=1e-5)
    m2 = marching_cubes(g, iso=0.3)
    np.testing.assert_allclose(interpolate_grid(g, m2.vertices), 0.3, atol=1e-5)


def test_multires_max_pool_contains_coarse(plate_scene, sensors):
    cfg, _, bvh = plate_scene
    g32 = evaluate_grid(bvh, 32, cfg.hidden_cube, sensors=sensors).values > 0.5
    g64 = evaluate_grid(bvh, 64, cfg.hidden_cube, sensors=sensors).values > 0.5
    pooled = g64.reshape(32, 2, 32, 2, 32, 2).max(axis=(1, 3, 5))
    assert g32.any()
    assert np.mean(pooled[g32]) >= 0.99


def test_fill_enclosed_pocket():
    v = shapes.box_indicator(32, (0.2, 0.2, 0.2), (0.8, 0.8, 0.8))
    v[14:18, 14:18, 14:18] = 0.0
    filled = fill_enclosed(FieldGrid(v, UNIT))
    assert np.all(filled.values[14:18, 14:18, 14:18] == 1.0)
    # Pockets open to the cube boundary stay free.
    v2 = np.ones((16,) * 3)
    v2[0:4, 5:8, 5:8] = 0.0
    assert np.array_equal(fill_enclosed(FieldGrid(v2, UNIT)).values, v2)


def test_plate_segmentation_matches_front_face(plate_oracle, sensors):
    cfg, mesh, grid = plate_oracle
    ex = extract_surface(grid, sensors)
    front = wall_visible_faces(mesh, sensors)
    # Mostly the wall-facing side; the thin rim is visible to off-axis sensors too.
    nz = ex.nlos_mesh.normals[:, 2]
    assert np.sum(ex.nlos_mesh.areas[nz < -0.5]) > 0.85 * ex.nlos_mesh.surface_area
    assert ex.nlos_mesh.surface_area == pytest.approx(front.surface_area, rel=0.10)
    assert chamfer(ex.nlos_mesh, front, cube=cfg.hidden_cube) < (2.0 / 64) ** 2
    # The back/lateral shadow hull is removed.
    assert ex.shadow_mesh.surface_area > ex.nlos_mesh.surface_area
    assert len(ex.nlos_mesh) + len(ex.shadow_mesh) == len(ex.closed_mesh)


def test_segmentation_monotone_in_k(plate_oracle, sensors):
    _, _, grid = plate_oracle
    closed = marching_cubes(fill_enclosed(grid))
    masks = [segment_nlos_surface(closed, sensors, k, grid.cell_size, min_island=0).nlos_mask
             for k in (1, 5, 13, 25)]
    for a, b in zip(masks, masks[1:]):
        assert np.all(b <= a)
    assert masks[-1].sum() < masks[0].sum()


def test_sphere_segmentation_union_of_caps(sphere_scene, sensors):
    cfg, mesh, bvh = sphere_scene
    grid = evaluate_grid(bvh, 64, cfg.hidden_cube, sensors=sensors)
    ex = extract_surface(grid, sensors)
    center = 0.5 * (mesh.bounds[0] + mesh.bounds[1])
    radius = 0.5 * (mesh.bounds[1] - mesh.bounds[0]).max()
    # Visible part = union of the caps seen by each sensor.
    expected = oracles.sphere_visible_fraction(center, radius, sensors)
    front = wall_visible_faces(mesh, sensors)
    assert front.surface_area / mesh.surface_area == pytest.approx(expected, abs=0.02)
    # The oracle hull is the sphere plus its umbra, so compare on the sphere part.
    on_sphere = np.abs(np.linalg.norm(ex.nlos_mesh.centroids - center, axis=1) - radius) < 2 * grid.cell_size
    assert on_sphere.all()
    kept = ex.nlos_mesh.surface_area / (4 * np.pi * radius ** 2)
    grazing = oracles.sphere_visible_fraction(center, radius, sensors, min_elevation=GRAZING)
    assert grazing - 0.02 <= kept <= expected + 0.02
    assert chamfer(ex.nlos_mesh, front, cube=cfg.hidden_cube) < (2.0 / 64) ** 2


def test_sphere_segmentation_narrow_aperture():
    # A wall patch much smaller than the sphere sees less than a hemisphere.
    cube = HiddenCube(0.5, 0.1)
    sens = WallScanGrid((0.02, 0.02), (5, 5)).positions
    center, radius = cube.center, 0.1
    grid = FieldGrid(shapes.sphere_indicator(64, radius / cube.side), cube)
    ex = extract_surface(grid, sens)
    kept = ex.nlos_mesh.surface_area
    sphere_area = 4 * np.pi * radius ** 2
    assert kept / sphere_area < 0.5
    upper = oracles.sphere_visible_fraction(center, radius, sens)
    lower = oracles.sphere_visible_fraction(center, radius, sens, min_elevation=GRAZING)
    assert lower - 0.02 <= kept / sphere_area <= upper + 0.02


def test_island_filter_drops_specks(sensors):
    cube = HiddenCube(0.5, 0.1)
    v = shapes.box_indicator(64, (0.2, 0.2, 0.4), (0.8, 0.8, 0.45))
    v[30:32, 30:32, 5:7] = 1.0  # tiny blob near the wall, well inside the aperture
    closed = marching_cubes(FieldGrid(v, cube))
    kept = segment_nlos_surface(closed, sensors, cell_size=cube.side / 64, min_island=0).nlos_mesh
    filtered = segment_nlos_surface(closed, sensors, cell_size=cube.side / 64).nlos_mesh
    assert len(np.unique(triangle_components(kept))) >= 2
    assert len(np.unique(triangle_components(filtered))) == 1
    assert filtered.surface_area < kept.surface_area


def test_fermat_plate_parallel_and_rotated(small):
    facing = shapes.quad((0, 0, 0.35), (0.3, 0.3), facing=-1, subdivisions=8)
    assert fermat_mask(facing, small.wall).all()
    rotated = shapes.quad((0, 0, 0.35), (0.3, 0.3), normal_axis=0, subdivisions=8)
    assert len(fermat_filter(rotated, small.wall)) == 0
    assert len(fermat_filter(facing.submesh(np.zeros(len(facing), bool)), small.wall)) == 0


def test_fermat_outside_aperture(small):
    # Facing the wall but the normal rays land beyond the scan area.
    off = shapes.quad((0.6, 0, 0.35), (0.1, 0.1), facing=-1, subdivisions=4)
    assert not fermat_mask(off, small.wall).any()


def test_fermat_sphere_solid_angle(small):
    d = 0.35
    s = shapes.icosphere(0.1, 5, center=(0, 0, d))
    kept = fermat_filter(s, small.wall)
    expected = oracles.rectangle_solid_angle(0.35, 0.35, d) / (4 * np.pi)
    assert kept.surface_area / s.surface_area == pytest.approx(expected, rel=0.05)


def test_fermat_respects_self_occlusion(small):
    near = shapes.quad((0, 0, 0.2), (0.4, 0.4), facing=-1)
    far = shapes.quad((0, 0, 0.4), (0.1, 0.1), facing=-1, subdivisions=2)
    from occfields.geometry import merge_meshes
    m = merge_meshes([near, far])
    mask = fermat_mask(m, small.wall)
    assert mask[:len(near)].all() and not mask[len(near):].any()


def test_subset_property(plate_oracle, sensors):
    _, _, grid = plate_oracle
    ex = extract_surface(grid, sensors)
    closed_tris = {tuple(sorted(map(tuple, np.round(t, 12)))) for t in ex.closed_mesh.corners}
    assert all(tuple(sorted(map(tuple, np.round(t, 12)))) in closed_tris for t in ex.nlos_mesh.corners)
    assert isinstance(ex.nlos_mesh, TriangleMesh)
