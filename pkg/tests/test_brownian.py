import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shrinkflow.brownian import (
    GeneratorConvention,
    birthless_ensemble,
    gtbm_step,
    martingale_qv_test,
    parse_surface_point,
    pushforward_Y,
    simulate_ensemble,
    simulate_path,
    sphere_time_change_check,
    time_grid,
)
from shrinkflow.errors import InsufficientPaths, StepTooLong
from shrinkflow.flow import SphereOracle
from shrinkflow.geodesic import SurfacePoint
from shrinkflow.sampling import NoiseSource, path_rng, tv_distance

from conftest import T_C

START = np.array([0.0, 0.6, 0.8])


def start_point(traj):
    return SurfacePoint.nearest(traj.initial, START)


class TestConventions:
    @pytest.mark.parametrize("text,c", [("half", 0.5), ("1/2", 0.5), ("one", 1.0), ("1", 1.0), (0.5, 0.5)])
    def test_parse(self, text, c):
        assert GeneratorConvention.parse(text).c == c

    def test_reject(self):
        with pytest.raises(ValueError):
            GeneratorConvention.parse("two")
        with pytest.raises(ValueError):
            GeneratorConvention(0.7)

    @given(st.sampled_from([0.5, 1.0]), st.integers(2, 6))
    def test_qv_slope(self, c, n):
        assert GeneratorConvention(c).qv_slope(n) == 2 * c * n


class TestGridsAndParsing:
    @given(st.floats(0.0, 0.1), st.floats(0.001, 0.1), st.floats(1e-4, 1e-2))
    def test_time_grid(self, u0, span, dt):
        g = time_grid(u0, u0 + span, dt)
        assert g[0] == u0 and g[-1] == pytest.approx(u0 + span)
        assert np.all(np.diff(g) <= dt * (1 + 1e-9))

    def test_relative_grid(self):
        g = time_grid(0.001, 0.1, 1e-2, rel=0.05)
        assert np.all(np.diff(g) <= 0.05 * g[:-1] + 1e-15)

    def test_parse_point(self):
        p = parse_surface_point("0.1,0.2,0.7@t42")
        assert p.triangle == 42
        np.testing.assert_allclose(p.bary, [0.1, 0.2, 0.7])
        with pytest.raises(ValueError):
            parse_surface_point("0.1,0.2@x")


class TestDeterminism:
    def test_noise_blocks(self):
        a = NoiseSource(3, [0, 5, 9]).draw(10)
        b = NoiseSource(3, [0, 5, 9])
        parts = np.concatenate([b.draw(4), b.draw(6)], axis=1)
        np.testing.assert_array_equal(a, parts)

    def test_same_seed_same_paths(self, sphere_traj):
        grid = time_grid(0.05, 0.1, 1e-3)
        p = start_point(sphere_traj)
        a = simulate_ensemble(sphere_traj, p, grid, 1.0, seed=4, path_ids=np.arange(40), workers=1)
        b = simulate_ensemble(sphere_traj, p, grid, 1.0, seed=4, path_ids=np.arange(40), workers=4)
        np.testing.assert_array_equal(a.positions, b.positions)
        c = simulate_ensemble(sphere_traj, p, grid, 1.0, seed=4, path_ids=np.arange(10))
        np.testing.assert_array_equal(a.positions[:10], c.positions)

    def test_single_path_matches_ensemble(self, sphere_traj):
        p = start_point(sphere_traj)
        path = simulate_path(sphere_traj, p, 0.05, 0.07, 1e-3, 1.0, seed=2, path_index=3)
        ens = simulate_ensemble(sphere_traj, p, time_grid(0.05, 0.07, 1e-3), 1.0, 2, path_ids=[3])
        np.testing.assert_allclose(pushforward_Y(sphere_traj, path).positions, ens.positions[0], atol=1e-14)

    def test_external_rng(self, sphere_traj):
        p = start_point(sphere_traj)
        a = simulate_path(sphere_traj, p, 0.05, 0.06, 1e-3, 0.5, rng=np.random.default_rng(8))
        b = simulate_path(sphere_traj, p, 0.05, 0.06, 1e-3, 0.5, rng=np.random.default_rng(8))
        assert a.points[-1] == b.points[-1]


class TestIncrements:
    @pytest.mark.parametrize("c", [0.5, 1.0])
    def test_one_step_variance(self, sphere_traj, c):
        # oracle: a step has two independent tangent components of variance 2c·dt
        dt = 1e-4
        u = 0.2
        p = start_point(sphere_traj)
        mesh = sphere_traj.backward_slice(u)
        rng = path_rng(0, 0)
        x0 = p.position(mesh)
        steps = np.array([gtbm_step(sphere_traj, u, p, dt, c, rng).position(mesh) - x0 for _ in range(4000)])
        assert np.mean(np.sum(steps**2, axis=1)) / dt == pytest.approx(4 * c, rel=0.06)

    def test_step_guard(self, sphere_traj):
        with pytest.raises(StepTooLong):
            gtbm_step(sphere_traj, 0.01, start_point(sphere_traj), 50.0, 1.0, path_rng(0, 0))

    def test_bary_invariants(self, sphere_traj):
        ens = simulate_ensemble(sphere_traj, start_point(sphere_traj), time_grid(0.05, 0.1, 1e-3), 1.0, 1,
                                path_ids=np.arange(50))
        assert ens.bary.min() >= 0.0
        np.testing.assert_allclose(ens.bary.sum(axis=2), 1.0, atol=1e-12)


class TestMartingale:
    @pytest.mark.parametrize("c", [0.5, 1.0])
    def test_qv_slope(self, sphere_traj, c):
        grid = time_grid(0.1 * T_C, 0.9 * T_C, 2e-3)
        ens = simulate_ensemble(sphere_traj, start_point(sphere_traj), grid, c, 21, path_ids=np.arange(600),
                                record_every=5)
        rep = martingale_qv_test(ens.times, ens.positions, c)
        assert rep["qv_slope"] == pytest.approx(2 * c * 2, rel=0.08)
        assert rep["max_norm"] <= 2.0

    def test_no_drift_for_c_one(self, sphere_traj):
        grid = time_grid(0.1 * T_C, 0.9 * T_C, 2e-3)
        ens = simulate_ensemble(sphere_traj, start_point(sphere_traj), grid, 1.0, 22, path_ids=np.arange(600),
                                record_every=20)
        rep = martingale_qv_test(ens.times, ens.positions, 1.0)
        assert np.max(np.abs(rep["drift_z_scores"])) < 3.5

    def test_too_few_paths(self):
        with pytest.raises(InsufficientPaths):
            martingale_qv_test(np.linspace(0, 1, 5), np.zeros((10, 5, 3)))


class TestTimeChange:
    def test_sphere_check(self):
        rep = sphere_time_change_check(SphereOracle(1.0), 1.0, 400, seed=5)
        assert rep["ks_pvalue"] > 0.001
        assert rep["phi_of_zero"] == pytest.approx(T_C)
        assert rep["max_ratio_error"] < 0.05


class TestBirthless:
    def test_consecutive_laws_get_closer(self, sphere_traj):
        res = birthless_ensemble(sphere_traj, start_point(sphere_traj), [0.2 * T_C, 0.1 * T_C, 0.05 * T_C],
                                 0.5 * T_C, 400, 1.0, seed=3, dt=1e-3)
        assert len(res["laws"]) == 3
        for law in res["laws"]:
            assert law.sum() == pytest.approx(1.0)
        assert res["tv_consecutive"][1] < res["tv_consecutive"][0] + 0.05
        assert tv_distance(res["uniform"], res["uniform"]) == 0.0
