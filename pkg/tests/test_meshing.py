import math

import numpy as np
import pytest

from sonarfield.fields import AnalyticScene, SpherePrimitive
from sonarfield.meshing import (DegenerateReportError, EmptyMeshError, Mesh,
                                _point_triangle_dist2, level_sweep,
                                load_mesh, marching_cubes, mesh_distance,
                                sample_surface, save_mesh)

UNIT_BBOX = (np.array([-1.5] * 3), np.array([1.5] * 3))


def unit_sphere_sdf(x):
    return np.linalg.norm(x, axis=-1) - 1.0


@pytest.fixture(scope="module")
def sphere_mesh():
    return marching_cubes(unit_sphere_sdf, UNIT_BBOX, 64)


class TestMarchingCubes:
    def test_sphere_vertices_on_surface(self, sphere_mesh):
        r = np.linalg.norm(sphere_mesh.vertices, axis=-1)
        assert np.abs(r - 1.0).max() < 0.05

    def test_watertight_area(self, sphere_mesh):
        assert sphere_mesh.areas().sum() == pytest.approx(4 * math.pi, rel=0.02)

    def test_empty_when_level_set_outside(self):
        m = marching_cubes(lambda x: unit_sphere_sdf(x) + 10.0, UNIT_BBOX, 16)
        assert m.is_empty

    def test_level_offset_shifts_radius(self):
        m = marching_cubes(unit_sphere_sdf, UNIT_BBOX, 48, level=0.2)
        r = np.linalg.norm(m.vertices, axis=-1)
        assert np.median(r) == pytest.approx(1.2, abs=0.02)

    def test_level_bounds_enforced(self):
        with pytest.raises(ValueError):
            marching_cubes(unit_sphere_sdf, UNIT_BBOX, 16, level=0.5)

    def test_resolution_floor(self):
        with pytest.raises(ValueError):
            marching_cubes(unit_sphere_sdf, UNIT_BBOX, 4)


class TestPointTriangleDistance:
    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        a, b, c = rng.normal(size=(3, 80, 3))
        p = rng.normal(size=(80, 3))
        d2 = _point_triangle_dist2(p, a, b, c)
        uu, vv = np.meshgrid(np.linspace(0, 1, 300), np.linspace(0, 1, 300))
        keep = uu + vv <= 1
        u, v = uu[keep][:, None], vv[keep][:, None]
        for i in range(80):
            q = a[i] + u * (b[i] - a[i]) + v * (c[i] - a[i])
            bf = ((q - p[i]) ** 2).sum(-1).min()
            assert d2[i] <= bf + 1e-12
            assert math.sqrt(d2[i]) >= math.sqrt(bf) - 1e-2  # grid resolution

    def test_point_on_triangle_is_zero(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[1.0, 0.0, 0.0]])
        c = np.array([[0.0, 1.0, 0.0]])
        p = np.array([[0.25, 0.25, 0.0]])
        assert _point_triangle_dist2(p, a, b, c)[0] == pytest.approx(0.0, abs=1e-15)

    def test_vertex_region(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[1.0, 0.0, 0.0]])
        c = np.array([[0.0, 1.0, 0.0]])
        p = np.array([[-1.0, -1.0, 0.0]])
        assert _point_triangle_dist2(p, a, b, c)[0] == pytest.approx(2.0)


class TestSampleSurface:
    def test_points_on_sphere(self, sphere_mesh):
        pts = sample_surface(sphere_mesh, 5000, np.random.default_rng(1))
        r = np.linalg.norm(pts, axis=-1)
        assert np.abs(r - 1.0).max() < 0.06

    def test_area_weighting(self):
        # two triangles, one 100x the area: samples land proportionally
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                          [10, 0, 0], [20, 0, 0], [10, 10, 0]], dtype=float)
        mesh = Mesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
        pts = sample_surface(mesh, 20000, np.random.default_rng(2))
        frac_big = (pts[:, 0] >= 5.0).mean()
        assert frac_big == pytest.approx(100 / 101, abs=0.01)


class TestMeshDistance:
    def test_identical_meshes_zero(self, sphere_mesh):
        rep = mesh_distance(sphere_mesh, sphere_mesh, n_samples=5000, seed=0)
        assert rep.hausdorff_max == pytest.approx(0.0, abs=1e-9)
        assert rep.mean == pytest.approx(0.0, abs=1e-9)

    def test_offset_spheres_hausdorff(self, sphere_mesh):
        off = np.array([0.5, 0.0, 0.0])
        moved = Mesh(sphere_mesh.vertices + off, sphere_mesh.triangles)
        rep = mesh_distance(sphere_mesh, moved, n_samples=20000, seed=0)
        assert rep.hausdorff_max == pytest.approx(0.5, rel=0.02)

    def test_threshold_monotone_max(self, sphere_mesh):
        moved = Mesh(sphere_mesh.vertices + np.array([0.5, 0.0, 0.0]),
                     sphere_mesh.triangles)
        r1 = mesh_distance(sphere_mesh, moved, n_samples=5000, threshold=0.2, seed=0)
        r2 = mesh_distance(sphere_mesh, moved, n_samples=5000, threshold=0.4, seed=0)
        r3 = mesh_distance(sphere_mesh, moved, n_samples=5000, seed=0)
        assert r1.hausdorff_max <= r2.hausdorff_max <= r3.hausdorff_max
        assert r1.discarded_fraction > 0

    def test_all_discarded_is_degenerate(self, sphere_mesh):
        far = Mesh(sphere_mesh.vertices + np.array([100.0, 0.0, 0.0]),
                   sphere_mesh.triangles)
        with pytest.raises(DegenerateReportError):
            mesh_distance(sphere_mesh, far, n_samples=2000, threshold=0.1, seed=0)

    def test_report_records_sampling(self, sphere_mesh):
        rep = mesh_distance(sphere_mesh, sphere_mesh, n_samples=2000, seed=0)
        assert rep.n_samples == 4000    # symmetric union
        assert rep.threshold == math.inf

    def test_deterministic_per_seed(self, sphere_mesh):
        moved = Mesh(sphere_mesh.vertices + 0.1, sphere_mesh.triangles)
        a = mesh_distance(sphere_mesh, moved, n_samples=2000, seed=3)
        b = mesh_distance(sphere_mesh, moved, n_samples=2000, seed=3)
        assert a == b


class TestLevelSweep:
    def test_picks_compensating_level(self, sphere_mesh):
        # reconstructed field is the sphere SDF inflated by 0.05: the sweep
        # should pick a level near +0.05 to match the reference surface
        def inflated(x):
            return unit_sphere_sdf(x) - 0.05
        lvl, mesh, rep = level_sweep(inflated, UNIT_BBOX, 48, sphere_mesh,
                                     np.linspace(-0.1, 0.1, 9), n_samples=4000)
        assert lvl == pytest.approx(-0.05, abs=0.026)
        assert rep.mean < 0.02

    def test_all_empty_raises(self):
        with pytest.raises(EmptyMeshError):
            level_sweep(lambda x: unit_sphere_sdf(x) + 10.0, UNIT_BBOX, 16,
                        marching_cubes(unit_sphere_sdf, UNIT_BBOX, 16),
                        np.linspace(-0.1, 0.1, 3), n_samples=1000)


class TestMeshIO:
    def test_off_roundtrip(self, tmp_path, sphere_mesh):
        p = tmp_path / "m.off"
        save_mesh(p, sphere_mesh)
        back = load_mesh(p)
        np.testing.assert_allclose(back.vertices, sphere_mesh.vertices, atol=1e-12)
        np.testing.assert_array_equal(back.triangles, sphere_mesh.triangles)

    def test_cleaned_drops_degenerate(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], dtype=float)
        mesh = Mesh(verts, np.array([[0, 1, 2], [0, 1, 3]]))  # second is collinear
        cleaned = mesh.cleaned()
        assert len(cleaned.triangles) == 1
