"""Self-checks against closed-form oracles, used by ``shrinkflow verify-all``."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from .brownian import martingale_qv_test, simulate_ensemble, sphere_time_change_check, time_grid
from .coupling import (
    CouplingConfig,
    comparison_G,
    comparison_G_derivative,
    comparison_gap,
    mirror_map,
    run_coupling_schedule,
)
from .errors import AmbiguousGeodesic
from .density import delta_density, solve_density, sphere_profile_error, uniform_density, uniqueness_experiment
from .flow import SphereOracle, run_flow, sphere_trajectory
from .geodesic import SurfacePoint, TangentVector, minimal_geodesic
from .mesh import ellipsoid, icosphere
from .sampling import path_rng


def _result(name, passed, **values) -> dict:
    return {"name": name, "passed": bool(passed), **values}


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def sphere_radius_errors(traj, fraction: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Worst vertexwise relative radius error against sqrt(R0² - 4t) for t ≤ fraction·T_c."""
    R0 = float(np.linalg.norm(traj.positions[0], axis=1).mean())
    oracle = SphereOracle(R0)
    keep = traj.times <= fraction * oracle.T_c
    t = traj.times[keep]
    r = np.linalg.norm(traj.positions[keep], axis=2)
    err = np.max(np.abs(r / oracle.radius(t)[:, None] - 1.0), axis=1)
    return t, err


def check_flow(out: Path, subdiv: int, dt0: float) -> list[dict]:
    sphere = icosphere(subdiv)
    traj = run_flow(sphere, dt0, 0.05, record_every=10)
    t, err = sphere_radius_errors(traj)
    _write_rows(out / "flow_radius.csv", ["t", "max_rel_radius_error"], zip(t, err))
    tc = traj.t_explosion_estimate
    res = [
        _result("sphere radius within 1%", err.max() <= 0.01, value=float(err.max()), target=0.01),
        _result("sphere T_c within 1%", abs(tc / 0.25 - 1) <= 0.01, value=tc, target=0.25),
    ]
    ell = ellipsoid(1.0, 1.0, 1.5, max(subdiv - 1, 2))
    ell_traj = run_flow(ell, dt0, 0.05, record_every=10)
    for name, mesh, est in (("sphere", sphere, tc), ("ellipsoid", ell, ell_traj.t_explosion_estimate)):
        bound = mesh.diameter**2 / 4.0
        res.append(_result(f"explosion bound ({name})", est <= bound, value=est, target=bound))
    return res


def check_mean_curvature(levels=(2, 3, 4)) -> list[dict]:
    errs, angles = [], []
    for k in levels:
        m = icosphere(k)
        errs.append(float(np.max(np.abs(m.mean_curvature / 2.0 - 1.0))))
        lap = m.laplacian_of_position
        cos = np.einsum("ij,ij->i", lap, m.vertex_normals) / np.linalg.norm(lap, axis=1)
        angles.append(float(np.degrees(np.arccos(np.clip(cos, -1, 1))).min()))
    return [
        _result("H error decreases under refinement", all(np.diff(errs) < 0), value=errs),
        _result("angle(ΔF, ν) ≥ 179°", min(angles) >= 179.0, value=min(angles), target=179.0),
    ]


def check_martingale(out: Path, seed: int, N: int, subdiv: int = 3) -> list[dict]:
    tc = 0.25
    traj = sphere_trajectory(icosphere(subdiv), np.linspace(0.0, 0.999 * tc, 400))
    grid = time_grid(0.1 * tc, 0.9 * tc, 1e-3)
    ens = simulate_ensemble(traj, SurfacePoint.nearest(traj.initial, np.array([0.0, 0.6, 0.8])), grid, 1.0, seed,
                            path_ids=np.arange(N), record_every=10)
    rep = martingale_qv_test(ens.times, ens.positions, 1.0)
    mean = ens.positions.mean(axis=0)
    _write_rows(out / "martingale_mean.csv", ["u", "x", "y", "z"], ((t, *m) for t, m in zip(ens.times, mean)))
    z = np.abs(rep["drift_z_scores"]).max()
    slope_err = abs(rep["qv_slope"] / rep["qv_expected"] - 1)
    return [
        _result("drift z-scores within ±3", z <= 3, value=float(z), target=3.0),
        _result("QV slope within 5% of 2cn", slope_err <= 0.05, value=rep["qv_slope"], target=rep["qv_expected"]),
        _result("|Y| bounded by diameter", rep["max_norm"] <= traj.initial.diameter, value=rep["max_norm"]),
    ]


def check_time_change(seed: int, N: int) -> list[dict]:
    rep = sphere_time_change_check(SphereOracle(1.0), 1.0, N, seed, subdiv=3)
    return [
        _result("φ-clock increments pass KS", rep["ks_pvalue"] > 0.01, value=rep["ks_pvalue"], target=0.01),
        _result("local QV ratio within 5%", rep["max_ratio_error"] <= 0.05, value=rep["max_ratio_error"], target=0.05),
    ]


def numeric_gap(r: float, n: int = 2, eps: float = 0.0) -> float:
    """Ġ(r) - Ġ(0) from integrating G'' = -μ²G and solving the two-point conditions."""
    mu = math.sqrt((1.0 - eps) / (n - 1))

    def rhs(_, y):
        return [y[1], -mu * mu * y[0]]

    kw = dict(rtol=1e-13, atol=1e-14, method="DOP853")
    a = solve_ivp(rhs, (0, r), [1.0, 0.0], **kw).y[:, -1]  # G(0)=1, G'(0)=0
    b = solve_ivp(rhs, (0, r), [0.0, 1.0], **kw).y[:, -1]  # G(0)=0, G'(0)=1
    slope0 = (1.0 - a[0]) / b[0]
    return float(a[1] + slope0 * b[1] - slope0)


def check_comparison() -> list[dict]:
    bc, resid, gap_err, worst_sign = 0.0, 0.0, 0.0, -np.inf
    for n in (2, 3):
        for eps in (0.0, 0.3):
            mu = math.sqrt((1 - eps) / (n - 1))
            for r in np.linspace(0.05, 0.95 * math.pi / mu, 7):
                bc = max(bc, abs(comparison_G(0.0, r, n, eps) - 1), abs(comparison_G(r, r, n, eps) - 1))
                s = np.linspace(0, r, 101)
                sol = solve_ivp(lambda _, y: [y[1], -mu * mu * y[0]], (0, r),
                                [1.0, float(comparison_G_derivative(0.0, r, n, eps))],
                                t_eval=s, rtol=1e-13, atol=1e-14, method="DOP853")
                resid = max(resid, float(np.max(np.abs(sol.y[0] - comparison_G(s, r, n, eps)))))
                gap = comparison_gap(r, n, eps)
                gap_err = max(gap_err, abs(gap - numeric_gap(r, n, eps)))
                worst_sign = max(worst_sign, gap)
    return [
        _result("G boundary values exact", bc <= 1e-14, value=bc),
        _result("G ODE residual", resid <= 1e-10, value=resid, target=1e-10),
        _result("gap matches ODE integration", gap_err <= 1e-8, value=gap_err, target=1e-8),
        _result("gap ≤ 0", worst_sign <= 0, value=worst_sign),
    ]


def check_mirror(seed: int, pairs: int = 20) -> list[dict]:
    mesh = icosphere(3)
    rng = path_rng(seed, 0)
    iso, flip = 0.0, 0.0
    for _ in range(pairs):
        x = SurfacePoint.nearest(mesh, rng.standard_normal(3))
        dirn = rng.standard_normal(3)
        y = SurfacePoint.nearest(mesh, x.position(mesh) + 0.5 * dirn / np.linalg.norm(dirn))
        if x.triangle == y.triangle:
            continue
        try:
            path = minimal_geodesic(mesh, x, y)
        except AmbiguousGeodesic:
            continue
        n = mesh.triangle_normals[x.triangle]
        v = rng.standard_normal(3)
        v -= np.dot(v, n) * n
        w = mirror_map(mesh, x, y, TangentVector(x, v), path=path)
        iso = max(iso, abs(np.linalg.norm(w.components) - np.linalg.norm(v)))
        g = mirror_map(mesh, x, y, TangentVector(x, path.initial_tangent), path=path)
        flip = max(flip, float(np.linalg.norm(g.components + path.final_tangent)))
    return [
        _result("mirror map is an isometry", iso <= 1e-10, value=iso, target=1e-10),
        _result("mirror map sends γ̇ to -γ̇", flip <= 1e-10, value=flip, target=1e-10),
    ]


def check_pde(out: Path, subdiv: int = 3) -> list[dict]:
    tc = 0.25
    traj = sphere_trajectory(icosphere(subdiv), np.linspace(0.0, 0.999 * tc, 400))
    u0 = 0.01 * tc
    fields = solve_density(traj, uniform_density(traj, u0), 0.9 * tc, 1e-3, 0.5)
    prof = sphere_profile_error(fields)
    exp = uniqueness_experiment(traj, delta_density(traj, u0, 0), uniform_density(traj, u0), 0.9 * tc, 1e-3, 0.5)
    drift = float(max(np.max(np.abs(exp["mass_a"] - 1)), np.max(np.abs(exp["mass_b"] - 1))))
    _write_rows(out / "pde_l1.csv", ["u", "l1", "mass_delta", "mass_uniform"],
                zip(exp["times"], exp["l1"], exp["mass_a"], exp["mass_b"]))
    return [
        _result("PDE mass conserved", drift <= 1e-6, value=drift, target=1e-6),
        _result("uniform profile reproduced", prof <= 5e-3, value=prof, target=5e-3),
        _result("L¹ distance non-increasing", exp["non_increasing"], value=float(exp["l1"][-1])),
    ]


def check_coupling(out: Path, seed: int, runs: int) -> list[dict]:
    tc = 0.25
    traj = sphere_trajectory(icosphere(3), np.linspace(0.0, 0.999 * tc, 300))
    cfg = CouplingConfig.from_trajectory(traj, 0.1 * tc)
    x = np.array([0.36, -0.48, 0.8])
    a, b = SurfacePoint.nearest(traj.initial, x), SurfacePoint.nearest(traj.initial, -x)
    rows, absorbing = [], True
    for i in range(runs):
        run = run_coupling_schedule(traj, cfg, a, b, 1.0, seed, i, u_end=0.9 * tc)
        ct = run.coupling_time
        if ct is not None:
            absorbing &= bool(np.all(run.rho[run.times >= ct] == 0))
        rows.append((i, "" if ct is None else repr(float(ct)), run.fallbacks))
    _write_rows(out / "coupling_times.csv", ["run", "coupling_time", "fallbacks"], rows)
    return [_result("coalescence is absorbing", absorbing)]


def run_suite(seed: int, quick: bool = True, out_dir=".") -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if quick:
        flow_subdiv, flow_dt, n_mart, n_tc, n_runs = 3, 2e-4, 1000, 1000, 20
    else:
        flow_subdiv, flow_dt, n_mart, n_tc, n_runs = 4, 1e-4, 10_000, 2000, 100
    results = []
    results += check_flow(out, flow_subdiv, flow_dt)
    results += check_mean_curvature()
    results += check_martingale(out, seed, n_mart)
    results += check_time_change(seed, n_tc)
    results += check_comparison()
    results += check_mirror(seed)
    results += check_pde(out)
    results += check_coupling(out, seed, n_runs)
    return results
