"""Acceptance criteria, one test each, at the documented tolerances.

Every test records a single PASS/FAIL line (printed again in the terminal
summary) with the measured values, then asserts the criterion.
"""
import filecmp
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import stats

from shrinkflow.brownian import martingale_qv_test, simulate_ensemble, sphere_time_change_check, time_grid, birthless_ensemble
from shrinkflow.coupling import CouplingConfig, run_coupling_schedule, tv_decay_estimate
from shrinkflow.density import (
    delta_density,
    feynman_kac_check,
    solve_density,
    uniform_density,
    uniqueness_experiment,
)
from shrinkflow.flow import SphereOracle, run_flow, sphere_trajectory
from shrinkflow.geodesic import SurfacePoint
from shrinkflow.mesh import ellipsoid, icosphere
from shrinkflow.sampling import tv_distance
from shrinkflow.verify import check_comparison, check_mirror, sphere_radius_errors

T_C = 0.25
START = np.array([0.36, -0.48, 0.8])


@pytest.fixture(scope="module")
def sphere_flow():
    t0 = time.perf_counter()
    traj = run_flow(icosphere(4), 1e-4, 0.05, record_every=10)
    return traj, time.perf_counter() - t0


@pytest.fixture(scope="module")
def exact_traj():
    return sphere_trajectory(icosphere(3), np.linspace(0.0, 0.999 * T_C, 400))


def test_1_sphere_flow(sphere_flow, report_criterion):
    traj, secs = sphere_flow
    _, err = sphere_radius_errors(traj, 0.9)
    tc = traj.t_explosion_estimate
    ok = err.max() <= 0.01 and abs(tc / T_C - 1) <= 0.01 and secs <= 120
    assert report_criterion(1, ok, f"max radius error {err.max():.2e} (≤1e-2), T_c {tc:.5f} (0.25±1%), {secs:.0f}s (≤120)")


def test_2_explosion_bound(sphere_flow, report_criterion):
    cases = {"sphere": (icosphere(4), sphere_flow[0].t_explosion_estimate)}
    for abc in ((1.0, 1.0, 1.5), (1.2, 0.9, 0.8)):
        m = ellipsoid(*abc, 3)
        cases[f"ellipsoid{abc}"] = (m, run_flow(m, 1e-4, 0.05, record_every=20).t_explosion_estimate)
    parts, ok = [], True
    for name, (m, est) in cases.items():
        bound = m.diameter**2 / 4.0
        ok &= est <= bound
        parts.append(f"{name} {est:.4f} ≤ {bound:.4f}")
    assert report_criterion(2, ok, "; ".join(parts))


def test_3_martingale(exact_traj, report_criterion):
    t0 = time.perf_counter()
    start = SurfacePoint.nearest(exact_traj.initial, [0.0, 0.6, 0.8])
    grid = time_grid(0.1 * T_C, 0.9 * T_C, 1e-3)
    reps = {}
    for c, N in ((1.0, 10_000), (0.5, 2000)):
        ens = simulate_ensemble(exact_traj, start, grid, c, seed=11, path_ids=np.arange(N), record_every=10)
        reps[c] = martingale_qv_test(ens.times, ens.positions, c)
    secs = time.perf_counter() - t0
    r1 = reps[1.0]
    z = float(np.max(np.abs(r1["drift_z_scores"])))
    slope_err = {c: abs(r["qv_slope"] / r["qv_expected"] - 1) for c, r in reps.items()}
    ok = z <= 3 and max(slope_err.values()) <= 0.05 and r1["max_norm"] <= exact_traj.initial.diameter and secs <= 600
    assert report_criterion(3, ok, f"c=1 N=1e4: max|z| {z:.2f} (≤3), QV slope {r1['qv_slope']:.3f} vs 4; "
                                   f"c=1/2: slope {reps[0.5]['qv_slope']:.3f} vs 2; max|Y| {r1['max_norm']:.3f}; {secs:.0f}s")


def test_4_discrete_laplacian(report_criterion):
    errs, angles = [], []
    for k in (3, 4, 5):
        m = icosphere(k)
        errs.append(float(np.max(np.abs(m.mean_curvature / 2.0 - 1.0))))
        lap = m.laplacian_of_position
        cos = np.einsum("ij,ij->i", lap, m.vertex_normals) / np.linalg.norm(lap, axis=1)
        angles.append(float(np.degrees(np.arccos(np.clip(cos, -1, 1))).min()))
    ok = errs[-1] <= 0.02 and all(np.diff(errs) < 0) and min(angles) >= 179.0
    assert report_criterion(4, ok, f"H errors {', '.join(f'{e:.1e}' for e in errs)} (sd 3-5), min angle {min(angles):.4f}°")


def test_5_birthless(exact_traj, report_criterion):
    mesh = exact_traj.initial
    a = SurfacePoint.nearest(mesh, START)
    b = SurfacePoint.nearest(mesh, -START)
    eps = [f * T_C for f in (0.2, 0.1, 0.05, 0.025, 0.01)]
    kw = dict(t_star=0.9 * T_C, N=5000, conv=1.0, dt=2.5e-4, cells_subdiv=1)
    ra = birthless_ensemble(exact_traj, a, eps, seed=5, **kw)
    rb = birthless_ensemble(exact_traj, b, eps[-1:], seed=6, **kw)
    cons = ra["tv_consecutive"][:3]
    tv_u = ra["tv_uniform"][-1]
    tv_ab = tv_distance(ra["laws"][-1], rb["laws"][-1])
    ok = all(np.diff(cons) < 0) and tv_u <= 0.05 and tv_ab <= 0.05
    assert report_criterion(5, ok, f"consecutive TV {', '.join(f'{x:.3f}' for x in cons)}; at 0.01·T_c "
                                   f"TV to uniform {tv_u:.3f} (≤0.05), between starts {tv_ab:.3f} (≤0.05)")


def test_6_time_change(report_criterion):
    parts, ok = [], True
    for c in (0.5, 1.0):
        rep = sphere_time_change_check(SphereOracle(1.0), c, 2000, seed=7, subdiv=3)
        ok &= rep["ks_pvalue"] > 0.01 and rep["max_ratio_error"] <= 0.05
        parts.append(f"c={c}: KS p {rep['ks_pvalue']:.3f}, QV ratio error {rep['max_ratio_error']:.3f}")
    assert report_criterion(6, ok, "; ".join(parts))


def test_7_coupling(report_criterion):
    t0 = time.perf_counter()
    iso = check_mirror(seed=3, pairs=20)[0]["value"]
    traj = sphere_trajectory(icosphere(3), np.linspace(0.0, 0.999 * T_C, 300))
    cfg = CouplingConfig.from_trajectory(traj, 0.1 * T_C)
    a, b = SurfacePoint.nearest(traj.initial, START), SurfacePoint.nearest(traj.initial, -START)
    u_end, dt, N = 0.9 * T_C, 2.5e-3, 500
    runs = [run_coupling_schedule(traj, cfg, a, b, 1.0, seed=21, run_index=i, u_end=u_end, dt=dt) for i in range(N)]
    k = np.linspace(0.025, u_end - cfg.N_start, 8)
    table = tv_decay_estimate(traj, cfg, (a, b), k, N, 1.0, runs=runs)
    p_couple = np.array(table["coupling_probability"])
    # Z3 against independent motions from the same start, through the distance to that start
    grid = time_grid(cfg.N_start, u_end, dt)
    ens = simulate_ensemble(traj, b, grid, 1.0, seed=22, path_ids=np.arange(N), record_every=None)
    end = traj.backward_slice(u_end)
    x_b = b.position(end)
    ref = np.linalg.norm(end.point_position(*ens.final_points()) - x_b, axis=1)
    z3 = np.linalg.norm(np.array([r.z3[-1] for r in runs]) - x_b, axis=1)
    ks = stats.ks_2samp(z3, ref).pvalue
    secs = time.perf_counter() - t0
    ok = (iso <= 1e-10 and ks > 0.01 and p_couple[0] > 0 and np.all(np.diff(p_couple) >= 0) and p_couple[-1] > p_couple[0]
          and table["log_slope"] < 0 and table["log_r2"] >= 0.9 and secs <= 900)
    assert report_criterion(7, ok, f"isometry {iso:.1e}; Z3 KS p {ks:.3f}; P(couple) {p_couple[0]:.3f}→{p_couple[-1]:.3f}; "
                                   f"log slope {table['log_slope']:.2f}, R² {table['log_r2']:.3f}; "
                                   f"{table['fallbacks']} fallbacks; {secs:.0f}s")


def test_8_backward_pde(report_criterion):
    # snapshots cluster toward the tip so that slice interpolation stays below the mesh error
    traj4 = sphere_trajectory(icosphere(4), T_C - np.geomspace(T_C, 1e-3 * T_C, 400))
    u0 = 0.01 * T_C
    fields = solve_density(traj4, uniform_density(traj4, u0), 0.9 * T_C, 1e-3)
    drift = max(abs(f.mass / fields[0].mass - 1) for f in fields)
    # oracle: 1/(4π r²) with r² = 4u on the unit sphere
    prof = max(float(np.max(np.abs(f.values * 16 * math.pi * f.t - 1))) for f in fields)
    l1 = {}
    mono = True
    for c in (0.5, 1.0):
        exp = uniqueness_experiment(traj4, delta_density(traj4, u0, 0), uniform_density(traj4, u0), 0.9 * T_C, 1e-3, c)
        l1[c] = float(exp["l1"][-1])
        mono &= exp["non_increasing"]
    fk = {}
    for c in (0.5, 1.0):
        rep = feynman_kac_check(traj4, delta_density(traj4, 0.05 * T_C, 0), 0.5 * T_C, 20_000, c, seed=8,
                                dt_pde=2.5e-4, dt_mc=5e-4, cells_subdiv=2)
        fk[c] = rep["tv"]
    ok = drift <= 1e-6 and prof <= 5e-3 and mono and max(l1.values()) <= 0.05 and max(fk.values()) <= 0.08
    assert report_criterion(8, ok, f"mass drift {drift:.1e}; profile error {prof:.2e} (≤5e-3); L¹ non-increasing {mono}, "
                                   f"at 0.9·T_c {l1[0.5]:.3f} (c=1/2), {l1[1.0]:.3f} (c=1) (≤0.05); "
                                   f"FK TV {fk[0.5]:.3f}, {fk[1.0]:.3f} (≤0.08)")


def test_9_comparison_function(report_criterion):
    res = check_comparison()
    ok = all(r["passed"] for r in res)
    assert report_criterion(9, ok, "; ".join(f"{r['name']} {r['value']:.1e}" for r in res))


def test_10_determinism(tmp_path, report_criterion):
    t0 = time.perf_counter()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "shrinkflow.cli", "verify-all", "--quick", "--seed", "42",
                               "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    secs = (time.perf_counter() - t0) / 2
    cmp = filecmp.dircmp(outs[0], outs[1])
    files = sorted(p.name for p in outs[0].iterdir())
    same = not cmp.left_only and not cmp.right_only and all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    ok = same and secs <= 600
    assert report_criterion(10, ok, f"{len(files)} files byte-identical {same}; {secs:.0f}s per quick run (≤600)")
