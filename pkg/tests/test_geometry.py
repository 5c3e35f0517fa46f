import numpy as np
import pytest

from occfields import shapes
from occfields.geometry import (
    AffineTransform, GeometryError, Ray, TriangleMesh, apply_transform, load_mesh, merge_meshes,
    normalize_mesh, save_mesh,
)


def test_degenerate_triangles_dropped():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], dtype=float)
    m = TriangleMesh(v, [[0, 1, 2], [0, 1, 3]])
    assert len(m) == 1


def test_index_out_of_range():
    with pytest.raises(GeometryError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])


def test_albedo_range():
    with pytest.raises(GeometryError):
        TriangleMesh(np.eye(3), [[0, 1, 2]], albedo=1.5)


def test_ccw_normals_point_outward():
    s = shapes.icosphere(1.0, 2)
    assert np.all(np.einsum("ij,ij->i", s.normals, s.centroids) > 0)
    b = shapes.box((0, 0, 0), (1, 2, 3))
    assert np.all(np.einsum("ij,ij->i", b.normals, b.centroids - [0.5, 1, 1.5]) > 0)
    assert b.surface_area == pytest.approx(2 * (2 + 3 + 6))


def test_ray_direction_normalized():
    r = Ray((0, 0, 0), (3, 4, 0))
    assert np.linalg.norm(r.direction) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(GeometryError):
        Ray((0, 0, 0), (0, 0, 0))
    seg = Ray.between((0, 0, 0), (0, 0, 2))
    assert seg.t_max == 2.0


def test_identity_transform_is_bitwise():
    m = normalize_mesh(shapes.icosphere(1.0, 2))
    out = apply_transform(m, AffineTransform())
    assert np.array_equal(out.vertices, m.vertices)


def test_half_scale_halves_diagonal():
    m = normalize_mesh(shapes.icosphere(1.0, 2))
    lo, hi = m.bounds
    lo2, hi2 = apply_transform(m, AffineTransform(0.5)).bounds
    assert np.linalg.norm(hi2 - lo2) == pytest.approx(0.5 * np.linalg.norm(hi - lo))


def test_transform_matches_hand_composed_matrix():
    m = normalize_mesh(shapes.letter("F"))
    xf = AffineTransform(0.7, (0.0, 20.0, 0.0), (0.1, 0.0, 0.2))
    a = np.radians(20.0)
    ry = np.array([[np.cos(a), 0, np.sin(a), 0], [0, 1, 0, 0], [-np.sin(a), 0, np.cos(a), 0], [0, 0, 0, 1]])
    s = np.diag([0.7, 0.7, 0.7, 1.0])
    t = np.eye(4)
    t[:3, 3] = (0.1, 0.0, 0.2)
    full = t @ ry @ s
    hv = np.c_[m.vertices, np.ones(len(m.vertices))] @ full.T
    out = apply_transform(m, xf)
    np.testing.assert_allclose(out.vertices, hv[:, :3], atol=1e-12)


def test_rotation_order_x_then_y_then_z():
    xf = AffineTransform(1.0, (90.0, 90.0, 0.0))
    # X first maps +y to +z, then Y maps +z to +x.
    np.testing.assert_allclose(xf.apply_points([[0.0, 1.0, 0.0]]), [[1.0, 0.0, 0.0]], atol=1e-12)


def test_transform_composition_with_identity():
    m = normalize_mesh(shapes.icosphere(1.0, 1))
    xf = AffineTransform(0.6, (5.0, 10.0, 3.0), (0.1, -0.1, 0.05))
    a = apply_transform(apply_transform(m, AffineTransform()), xf)
    b = apply_transform(m, xf)
    np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-9)


def test_out_of_bounds():
    m = normalize_mesh(shapes.plate())
    with pytest.raises(GeometryError, match="out of scene bounds"):
        apply_transform(m, AffineTransform(0.9, translation=(0.3, 0, 0)))


def test_transform_dict_roundtrip():
    xf = AffineTransform(0.65, (1.0, 2.0, 3.0), (0.1, 0.2, -0.3))
    assert AffineTransform.from_dict(xf.to_dict()) == xf


def test_merge_preserves_counts():
    a, b = shapes.plate(), shapes.icosphere(0.2, 1)
    assert len(merge_meshes([a, b])) == len(a) + len(b)


@pytest.mark.parametrize("suffix", [".obj", ".ply"])
def test_mesh_io_roundtrip(tmp_path, suffix):
    m = shapes.icosphere(0.5, 2)
    path = tmp_path / f"m{suffix}"
    save_mesh(m, path)
    back = load_mesh(path)
    assert np.array_equal(back.triangles, m.triangles)
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)


def test_obj_polygons_fan_triangulated(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = load_mesh(p)
    assert len(m) == 2 and m.surface_area == pytest.approx(1.0)


def test_missing_mesh_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nothere.obj"):
        load_mesh(tmp_path / "nothere.obj")


def test_surface_samples_on_mesh(rng):
    s = shapes.icosphere(0.7, 3)
    pts, tri = s.sample_surface(2000, rng)
    c = s.corners[tri]
    n = s.normals[tri]
    assert np.allclose(np.einsum("ij,ij->i", pts - c[:, 0], n), 0.0, atol=1e-12)
