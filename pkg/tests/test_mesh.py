import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shrinkflow.errors import BadParams, Degenerate, NonManifold
from shrinkflow.mesh import (
    TriangulatedHypersurface,
    builtin_mesh,
    ellipsoid,
    icosphere,
    in_convex_position,
    parse_mesh_spec,
    read_mesh,
    validate_convex_mesh,
    write_off,
)


class TestConstruction:
    @given(st.integers(0, 4))
    def test_icosphere_counts(self, k):
        m = icosphere(k)
        assert m.n_vertices == 10 * 4**k + 2
        assert m.n_triangles == 20 * 4**k
        assert m.topology.euler_characteristic == 2

    def test_icosahedron(self):
        m = icosphere(0, 1.0)
        assert m.n_vertices == 12
        np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-15)

    def test_subdiv4_on_unit_sphere(self, sphere4):
        assert sphere4.n_vertices == 2562
        np.testing.assert_allclose(np.linalg.norm(sphere4.vertices, axis=1), 1.0, atol=1e-14)

    @pytest.mark.parametrize("k", [-1, 8, 2.5])
    def test_bad_subdiv(self, k):
        with pytest.raises(BadParams):
            icosphere(k)

    def test_builtin(self):
        assert builtin_mesh("icosphere", subdiv=1, R=2.0).n_vertices == 42
        assert builtin_mesh("ellipsoid", a=1, b=1, c=1.5, subdiv=1).n_vertices == 42
        with pytest.raises(BadParams):
            builtin_mesh("torus")

    def test_parse_spec(self):
        m = parse_mesh_spec("icosphere:2:0.5")
        np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 0.5)
        e = parse_mesh_spec("ellipsoid:1,2,3:1")
        np.testing.assert_allclose(np.ptp(e.vertices, axis=0), [2, 4, 6])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_mesh(tmp_path / "nope.off")

    def test_off_round_trip(self, tmp_path, sphere3):
        write_off(sphere3, tmp_path / "s.off")
        back = read_mesh(tmp_path / "s.off")
        np.testing.assert_array_equal(back.vertices, sphere3.vertices)
        np.testing.assert_array_equal(back.triangles, sphere3.triangles)

    def test_open_surface_rejected(self, sphere3):
        with pytest.raises(NonManifold):
            TriangulatedHypersurface(sphere3.vertices, sphere3.triangles[1:])

    def test_degenerate_rejected(self):
        m = icosphere(0)
        v = m.vertices.copy()
        a, b, c = m.triangles[0]
        v[c] = 0.5 * (v[a] + v[b])
        with pytest.raises(Degenerate):
            m.with_vertices(v)


class TestConvexity:
    def test_sphere_and_ellipsoid_convex(self, sphere4):
        assert validate_convex_mesh(sphere4).strictly_convex
        assert validate_convex_mesh(ellipsoid(1, 1, 1.5)).strictly_convex

    def test_dent_detected(self, sphere3):
        v = sphere3.vertices.copy()
        v[0] *= 0.8
        rep = validate_convex_mesh(sphere3.with_vertices(v))
        assert not rep.strictly_convex
        assert rep.n_nonconvex_edges > 0

    def test_convex_position(self, sphere3):
        assert in_convex_position(sphere3)
        v = sphere3.vertices.copy()
        v[0] *= 0.8
        assert not in_convex_position(sphere3.with_vertices(v))


class TestOperators:
    def test_stiffness_properties(self, sphere3):
        S = sphere3.stiffness
        assert abs(S - S.T).max() < 1e-14
        np.testing.assert_allclose(np.asarray(S.sum(axis=1)).ravel(), 0.0, atol=1e-12)
        x = np.random.default_rng(0).standard_normal(sphere3.n_vertices)
        assert x @ (S @ x) > 0

    def test_vertex_areas_partition_area(self, sphere3):
        assert sphere3.vertex_areas.sum() == pytest.approx(sphere3.area, rel=1e-12)

    def test_area_converges(self):
        errs = [abs(icosphere(k).area / (4 * np.pi) - 1) for k in (2, 3, 4)]
        assert errs[0] > errs[1] > errs[2]

    @given(st.floats(0.3, 3.0))
    def test_mean_curvature_scales(self, R):
        # oracle: H = n / R on a round sphere
        m = icosphere(3, R)
        np.testing.assert_allclose(m.mean_curvature, 2.0 / R, rtol=1e-3)

    def test_mean_curvature_vector_points_inward(self, sphere3):
        lap = sphere3.laplacian_of_position
        cos = np.einsum("ij,ij->i", lap, sphere3.vertex_normals) / np.linalg.norm(lap, axis=1)
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))).min() >= 179.0

    def test_gauss_bonnet(self):
        # total angle defect is 2π·χ = 4π on any closed genus-0 mesh
        for m in (icosphere(2), ellipsoid(1, 2, 3, 2)):
            assert m.gaussian_curvature @ m.vertex_areas == pytest.approx(4 * np.pi, rel=1e-12)

    def test_locate_round_trip(self, sphere3):
        rng = np.random.default_rng(1)
        tri = rng.integers(0, sphere3.n_triangles, 50)
        bary = rng.dirichlet(np.ones(3), 50)
        x = sphere3.point_position(tri, bary)
        t2, b2 = sphere3.locate(x)
        np.testing.assert_allclose(sphere3.point_position(t2, b2), x, atol=1e-12)
