import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shrinkflow.density import (
    delta_density,
    density_from_values,
    feynman_kac_check,
    solve_density,
    sphere_profile_error,
    step_density,
    uniform_density,
    uniqueness_experiment,
)

from shrinkflow.flow import sphere_trajectory
from shrinkflow.mesh import icosphere

from conftest import T_C


class TestConservation:
    @pytest.mark.parametrize("c", [0.5, 1.0])
    def test_mass_and_uniform_profile(self, sphere_traj, c):
        fields = solve_density(sphere_traj, uniform_density(sphere_traj, 0.01 * T_C), 0.5 * T_C, 2e-3, c)
        assert max(abs(f.mass - 1) for f in fields) < 1e-12
        # oracle: on a shrinking round sphere the uniform density stays 1/area
        assert sphere_profile_error(fields) < 1e-12

    @settings(max_examples=10)
    @given(st.integers(0, 641), st.sampled_from([0.5, 1.0]))
    def test_delta_stays_positive_and_normalized(self, sphere_traj, v, c):
        fields = solve_density(sphere_traj, delta_density(sphere_traj, 0.05 * T_C, v), 0.15 * T_C, 5e-3, c, keep=False)
        h = fields[-1]
        assert h.mass == pytest.approx(1.0, abs=1e-12)
        assert np.all(h.values > 0)

    def test_potential_scheme_first_order(self, sphere_traj):
        # the potential scheme conserves mass only up to an O(dt) error
        h0 = uniform_density(sphere_traj, 0.1 * T_C)
        err = [abs(solve_density(sphere_traj, h0, 0.5 * T_C, dt, scheme="potential", keep=False)[-1].mass - 1)
               for dt in (2e-3, 1e-3, 5e-4)]
        assert err[0] / err[1] > 1.8 and err[1] / err[2] > 1.8
        assert err[2] < 0.02

    def test_zero_step_copies(self, sphere_traj):
        h = uniform_density(sphere_traj, 0.1)
        assert np.array_equal(step_density(h, 0.0, sphere_traj).values, h.values)
        with pytest.raises(ValueError):
            step_density(h, -1e-3, sphere_traj)
        with pytest.raises(ValueError):
            step_density(h, 1e-3, sphere_traj, scheme="explicit")


class TestContraction:
    @pytest.mark.parametrize("c", [0.5, 1.0])
    def test_l1_non_increasing(self, sphere_traj, c):
        u0 = 0.01 * T_C
        exp = uniqueness_experiment(sphere_traj, delta_density(sphere_traj, u0, 0), uniform_density(sphere_traj, u0),
                                    0.6 * T_C, 2e-3, c)
        assert exp["non_increasing"]
        assert exp["l1"][-1] < exp["l1"][0]
        assert exp["l1"][0] == pytest.approx(2.0 - 2.0 * sphere_traj.backward_slice(u0).vertex_areas[0]
                                             / sphere_traj.backward_slice(u0).vertex_areas.sum(), rel=1e-12)

    def test_c_one_contracts_faster(self, sphere_traj):
        u0 = 0.01 * T_C
        finals = [uniqueness_experiment(sphere_traj, delta_density(sphere_traj, u0, 0), uniform_density(sphere_traj, u0),
                                        0.5 * T_C, 2e-3, c)["l1"][-1] for c in (0.5, 1.0)]
        assert finals[1] < finals[0]

    @pytest.mark.parametrize("c", [0.5, 1.0])
    def test_l1_matches_first_mode_decay(self, c):
        # oracle: on the φ clock the motion is (c/2)Δ on the unit sphere for a
        # duration 2T_c·ln(u1/u0); a point mass then differs from uniform by its
        # l=1 mode, (3/4π)cosθ·e^{-cΔs}, whose L¹ norm is 1.5·e^{-cΔs}
        traj = sphere_trajectory(icosphere(3), T_C - np.geomspace(T_C, 1e-3 * T_C, 400))
        u0, u1 = 0.05 * T_C, 0.9 * T_C
        exp = uniqueness_experiment(traj, delta_density(traj, u0, 0), uniform_density(traj, u0), u1, 2.5e-4, c)
        ds = 2 * T_C * math.log(u1 / u0)
        assert exp["l1"][-1] == pytest.approx(1.5 * math.exp(-c * ds), rel=0.05)

    def test_first_order_in_dt(self, sphere_traj):
        # self-convergence: error ratio near 2 under halving for implicit Euler
        u0, u1 = 0.05 * T_C, 0.2 * T_C
        h0 = delta_density(sphere_traj, u0, 5)
        sols = [solve_density(sphere_traj, h0, u1, dt, keep=False)[-1].values for dt in (4e-3, 2e-3, 1e-3, 5e-4)]
        e = [np.max(np.abs(sols[i] - sols[i + 1])) for i in range(3)]
        assert e[0] / e[1] > 1.8 and e[1] / e[2] > 1.8


class TestInputs:
    def test_from_values(self, sphere_traj):
        h = density_from_values(sphere_traj, 0.1, np.arange(642.0))
        assert h.mass == pytest.approx(1.0)
        with pytest.raises(ValueError):
            density_from_values(sphere_traj, 0.1, -np.ones(642))
        with pytest.raises(ValueError):
            density_from_values(sphere_traj, 0.1, np.ones(10))

    def test_mismatched_start(self, sphere_traj):
        with pytest.raises(ValueError):
            uniqueness_experiment(sphere_traj, uniform_density(sphere_traj, 0.1), uniform_density(sphere_traj, 0.2), 0.15, 1e-2)


class TestFeynmanKac:
    def test_small_sample_warns(self, sphere_traj):
        h = delta_density(sphere_traj, 0.05 * T_C, 0)
        with pytest.warns(RuntimeWarning):
            rep = feynman_kac_check(sphere_traj, h, 0.1 * T_C, 50, seed=1, dt_pde=2e-3, dt_mc=2e-3)
        assert rep["insufficient_paths"]
        assert 0 <= rep["tv"] <= 1

    def test_agreement(self, sphere_traj):
        h = delta_density(sphere_traj, 0.05 * T_C, 0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            rep = feynman_kac_check(sphere_traj, h, 0.3 * T_C, 4000, 1.0, seed=3, dt_pde=1e-3, dt_mc=1e-3)
        assert rep["pde_mass"] == pytest.approx(1.0, abs=1e-10)
        # sampling noise on 42 cells with 4000 paths is about 0.04
        assert rep["tv"] < 0.08
