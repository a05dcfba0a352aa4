"""Mirror (reflection) coupling of two motions on the evolving surface.

A run alternates between an independent regime, where both particles use their
own noise, and a mirror regime, where the second particle receives the first
one's increment transported along the connecting minimal geodesic and reflected
in the hyperplane orthogonal to it. Once the particles are within the
coalescence radius they are glued together.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .brownian import HALF, GeneratorConvention, _advance, time_grid
from .errors import AmbiguousGeodesic, DomainError, GeodesicFailure, InsufficientRuns, NotConvex, TooFar
from .flow import FlowTrajectory
from .geodesic import (
    GeodesicPath,
    SurfacePoint,
    TangentVector,
    minimal_geodesic,
    reorthonormalize,
    tangent_frame,
    transport_along_strip,
    walk_batch,
)
from .mesh import TriangulatedHypersurface, validate_convex_mesh
from .sampling import NoiseSource

CURVATURE_SAFETY = 0.97


# ---------------------------------------------------------------------- geometry
def closed_geodesic_probe(mesh: TriangulatedHypersurface, n_points: int = 6, n_dirs: int = 3) -> float:
    """Length of the shortest nearly closed straight walk found from a few probes.

    Walks are advanced in short increments; the return length is the first
    local minimum of the distance to the start once the walk has gone past
    its farthest point.
    """
    rng = np.random.default_rng(12345)
    starts = rng.choice(mesh.n_triangles, size=min(n_points, mesh.n_triangles), replace=False)
    tri = np.repeat(starts, n_dirs)
    bary = np.full((len(tri), 3), 1.0 / 3.0)
    frames = tangent_frame(mesh, tri)
    ang = np.tile(np.pi * np.arange(n_dirs) / n_dirs, len(starts))
    direction = np.cos(ang)[:, None] * frames[:, 0] + np.sin(ang)[:, None] * frames[:, 1]
    x0 = mesh.point_position(tri, bary)
    h = 0.5 * mesh.mean_edge_length
    extent = float(np.ptp(mesh.vertices, axis=0).max())
    max_len = 4.0 * extent
    dist_prev = np.zeros(len(tri))
    left = np.zeros(len(tri), dtype=bool)
    descending = np.zeros(len(tri), dtype=bool)
    found = np.full(len(tri), np.inf)
    walked = 0.0
    while walked < max_len and not np.all(np.isfinite(found)):
        tri, bary, direction, _ = walk_batch(mesh, tri, bary, h * direction)
        walked += h
        d = np.linalg.norm(mesh.point_position(tri, bary) - x0, axis=1)
        left |= d > 0.5 * extent
        descending |= left & (d < dist_prev)
        turning = descending & (d > dist_prev) & ~np.isfinite(found)
        found[turning] = walked - h
        dist_prev = d
    return float(found.min())


def injectivity_proxy(mesh: TriangulatedHypersurface, probe: bool = True) -> float:
    """Conservative radius below which minimal geodesics are treated as unique.

    min(safety·π/√K_max, L/2) with K_max the largest discrete Gaussian
    curvature and L the shortest closed straight walk found by the probe.
    """
    if not validate_convex_mesh(mesh).strictly_convex:
        raise NotConvex("injectivity proxy needs a strictly convex mesh")
    k_max = float(mesh.gaussian_curvature.max())
    bound = CURVATURE_SAFETY * math.pi / math.sqrt(k_max)
    if probe:
        bound = min(bound, 0.5 * closed_geodesic_probe(mesh))
    return bound


def mirror_map(mesh: TriangulatedHypersurface, x: SurfacePoint, y: SurfacePoint, v: TangentVector,
               inj_proxy: float | None = None, path: GeodesicPath | None = None) -> TangentVector:
    """Transport v from x to y along the minimal geodesic, then reflect it.

    The reflection is in the hyperplane orthogonal to the arriving geodesic
    direction, so v = γ̇(0) maps to -γ̇ at y.
    """
    if x == y:
        return TangentVector(y, np.array(v.components))
    if path is None:
        path = minimal_geodesic(mesh, x, y)
    if inj_proxy is not None and path.length > inj_proxy:
        raise TooFar(f"distance {path.length:.4g} exceeds injectivity proxy {inj_proxy:.4g}")
    w = transport_along_strip(mesh, path.strip, v.components)
    a = path.final_tangent
    return TangentVector(y, w - 2.0 * np.dot(w, a) * a)


# ---------------------------------------------------------------------- comparison ODE
def _mu(n: int, eps: float) -> float:
    if n < 2:
        raise DomainError("n must be at least 2")
    if eps >= 1:
        raise DomainError("eps must be below 1")
    return math.sqrt((1.0 - eps) / (n - 1))


def comparison_G(s, r: float, n: int = 2, eps: float = 0.0):
    """G(s) = cos(μs) + ((1 - cos μr)/sin μr)·sin(μs); solves G'' + μ²G = 0, G(0) = G(r) = 1."""
    mu = _mu(n, eps)
    sin_r = math.sin(mu * r)
    if r <= 0 or mu * r >= math.pi or abs(sin_r) < 1e-12:
        raise DomainError(f"r = {r} outside (0, π/μ) for μ = {mu:.6g}")
    s = np.asarray(s, dtype=float)
    if np.any(s < -1e-15) or np.any(s > r + 1e-15):
        raise DomainError("s must lie in [0, r]")
    k = (1.0 - math.cos(mu * r)) / sin_r
    return np.cos(mu * s) + k * np.sin(mu * s)


def comparison_G_derivative(s, r: float, n: int = 2, eps: float = 0.0):
    mu = _mu(n, eps)
    comparison_G(0.0, r, n, eps)  # domain check
    k = (1.0 - math.cos(mu * r)) / math.sin(mu * r)
    s = np.asarray(s, dtype=float)
    return -mu * np.sin(mu * s) + k * mu * np.cos(mu * s)


def comparison_gap(r: float, n: int = 2, eps: float = 0.0) -> float:
    """Ġ(r) - Ġ(0) = -2μ tan(μr/2)."""
    mu = _mu(n, eps)
    comparison_G(0.0, r, n, eps)
    return -2.0 * mu * math.tan(0.5 * mu * r)


# ---------------------------------------------------------------------- schedule
@dataclass
class CouplingConfig:
    theta: float
    theta_far: float
    inj_proxy: float
    N_start: float
    phase_cap: float = 0.5
    coalescence_factor: float = 2.0  # δ_c = factor · mean edge length of the current slice
    scale_with_slice: bool = True

    def __post_init__(self):
        if not (0 < self.theta < self.theta_far <= self.inj_proxy):
            raise ValueError("need 0 < theta < theta_far <= inj_proxy")
        if self.phase_cap <= 0:
            raise ValueError("phase_cap must be positive")

    @classmethod
    def from_trajectory(cls, traj: FlowTrajectory, N_start: float, **kw) -> "CouplingConfig":
        inj = injectivity_proxy(traj.backward_slice(N_start))
        return cls(theta=inj / 4.0, theta_far=inj / 2.0, inj_proxy=inj, N_start=N_start, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CouplingRun:
    times: np.ndarray
    regimes: list
    rho: np.ndarray  # intrinsic distance where computed, NaN otherwise
    chord: np.ndarray
    z1: np.ndarray
    z3: np.ndarray
    phases: list = field(default_factory=list)
    coupling_time: float | None = None
    fallbacks: int = 0
    coalescence_radius: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "regime", "distance", "chord"])
            for t, reg, r, ch in zip(self.times, self.regimes, self.rho, self.chord):
                w.writerow([repr(float(t)), reg, "" if np.isnan(r) else repr(float(r)), repr(float(ch))])


def _walk_one(mesh, p: SurfacePoint, vec) -> SurfacePoint:
    tri, bary, _, _ = walk_batch(mesh, [p.triangle], p.bary[None], np.asarray(vec)[None])
    return SurfacePoint(tri[0], bary[0])


def coupled_step(traj: FlowTrajectory, u: float, z1: SurfacePoint, z3: SurfacePoint, dt: float, conv=HALF, rng=None,
                 frame1=None, coalescence_radius: float | None = None, path: GeodesicPath | None = None, xi=None):
    """One mirror-coupled step; returns (z1', z3', coalesced).

    The increment of z1 is ξ in its frame; z3 receives the mirror image of
    that increment. Raises AmbiguousGeodesic if the connecting geodesic is not
    unique (the caller then takes an independent step).
    """
    conv = GeneratorConvention.parse(conv)
    mesh = traj.backward_slice(u)
    if coalescence_radius is None:
        coalescence_radius = 2.0 * mesh.mean_edge_length
    if z1 == z3:
        return z1, z1, True
    if path is None:
        path = minimal_geodesic(mesh, z1, z3)
    fr = tangent_frame(mesh, [z1.triangle]) if frame1 is None else reorthonormalize(mesh, [z1.triangle], np.asarray(frame1)[None])
    xi = np.asarray(rng.standard_normal(2) if xi is None else xi, dtype=float)
    v1 = math.sqrt(2.0 * conv.c * dt) * (xi[0] * fr[0, 0] + xi[1] * fr[0, 1])
    v3 = mirror_map(mesh, z1, z3, TangentVector(z1, v1), path=path).components
    new1 = _walk_one(mesh, z1, v1)
    new3 = _walk_one(mesh, z3, v3)
    nxt = traj.backward_slice(u + dt)
    if np.linalg.norm(new1.position(nxt) - new3.position(nxt)) <= coalescence_radius:
        d = minimal_geodesic(nxt, new1, new3, check_ambiguity=False).length
        if d <= coalescence_radius:
            return new1, new1, True
    return new1, new3, False


def _tau_clock(traj: FlowTrajectory):
    if traj.normalized_time is not None:
        return lambda u: float(traj.tau(u))
    return lambda u: float(u)


def run_coupling_schedule(traj: FlowTrajectory, cfg: CouplingConfig, start_a: SurfacePoint, start_b: SurfacePoint,
                          conv=HALF, seed: int = 0, run_index: int = 0, u_end: float | None = None,
                          dt: float = 2.5e-3) -> CouplingRun:
    """Independent / mirror schedule from cfg.N_start to u_end.

    Independent until the intrinsic distance drops to θ; mirror until
    coalescence, distance above θ_far, or the phase has lasted phase_cap
    in normalized time; then repeat. Thresholds grow with the slice when
    ``cfg.scale_with_slice`` is set.
    """
    conv = GeneratorConvention.parse(conv)
    lo, hi = traj.backward_time_range()
    u_end = min(hi, traj.t_explosion_estimate) if u_end is None else u_end
    grid = time_grid(cfg.N_start, u_end, dt)
    noise = NoiseSource(seed, [run_index], dim=4)
    clock = _tau_clock(traj)
    area0 = traj.backward_slice(cfg.N_start).area

    z1, z3 = start_a, start_b
    mesh = traj.backward_slice(grid[0])
    f1 = tangent_frame(mesh, [z1.triangle])
    f3 = tangent_frame(mesh, [z3.triangle])
    n = len(grid)
    rho = np.full(n, np.nan)
    chord = np.zeros(n)
    pos1 = np.zeros((n, 3))
    pos3 = np.zeros((n, 3))
    regimes: list[str] = []
    phases: list[dict] = []
    deltas: list[float] = []
    coupled = z1 == z3
    coupling_time = grid[0] if coupled else None
    regime = "coalesced" if coupled else "independent"
    phase_start = grid[0]
    fallbacks = 0
    xi_all = noise.draw(n - 1)[0]

    def scale(mesh):
        return math.sqrt(mesh.area / area0) if cfg.scale_with_slice else 1.0

    for k in range(n):
        u = grid[k]
        mesh = traj.backward_slice(u)
        x1, x3 = z1.position(mesh), z3.position(mesh)
        pos1[k], pos3[k] = x1, x3
        chord[k] = float(np.linalg.norm(x1 - x3))
        s = scale(mesh)
        theta, theta_far = cfg.theta * s, cfg.theta_far * s
        delta_c = cfg.coalescence_factor * mesh.mean_edge_length
        deltas.append(delta_c)
        path = None
        limit = theta_far if regime == "mirror" else max(theta, delta_c)
        if not coupled and chord[k] <= limit:
            try:
                path = minimal_geodesic(mesh, z1, z3)
                rho[k] = path.length
            except (AmbiguousGeodesic, GeodesicFailure):
                path = None
        if coupled:
            rho[k] = 0.0
        elif not np.isnan(rho[k]) and rho[k] <= delta_c:
            z3, coupled, coupling_time = z1, True, u
            rho[k] = 0.0
            pos3[k] = pos1[k]
        # regime switching
        new_regime = regime
        if coupled:
            new_regime = "coalesced"
        elif regime == "independent" and not np.isnan(rho[k]) and rho[k] <= theta:
            new_regime = "mirror"
        elif regime == "mirror":
            too_far = chord[k] > theta_far or (not np.isnan(rho[k]) and rho[k] > theta_far)
            capped = clock(u) - clock(phase_start) >= cfg.phase_cap
            if too_far or capped:
                new_regime = "independent"
        if new_regime != regime:
            phases.append({"regime": regime, "start": float(phase_start), "end": float(u)})
            regime, phase_start = new_regime, u
        regimes.append(regime)
        if k == n - 1:
            break
        dtk = grid[k + 1] - u
        xi = xi_all[k]
        if regime == "coalesced":
            t1, b1, f1 = _advance(mesh, np.array([z1.triangle]), z1.bary[None], f1, xi[None, :2], dtk, conv.c)
            z1 = SurfacePoint(t1[0], b1[0])
            z3 = z1
            continue
        if regime == "mirror" and path is not None:
            f1 = reorthonormalize(mesh, [z1.triangle], f1)
            v1 = math.sqrt(2.0 * conv.c * dtk) * (xi[0] * f1[0, 0] + xi[1] * f1[0, 1])
            v3 = mirror_map(mesh, z1, z3, TangentVector(z1, v1), path=path).components
            t1, b1, _, c1 = walk_batch(mesh, [z1.triangle], z1.bary[None], v1[None], carry=f1)
            t3, b3, _, _ = walk_batch(mesh, [z3.triangle], z3.bary[None], v3[None])
            z1, z3 = SurfacePoint(t1[0], b1[0]), SurfacePoint(t3[0], b3[0])
            f1 = c1
            f3 = tangent_frame(mesh, [z3.triangle])
            continue
        if regime == "mirror":
            fallbacks += 1  # ambiguous geodesic: one independent step
        t1, b1, f1 = _advance(mesh, np.array([z1.triangle]), z1.bary[None], f1, xi[None, :2], dtk, conv.c)
        t3, b3, f3 = _advance(mesh, np.array([z3.triangle]), z3.bary[None], f3, xi[None, 2:], dtk, conv.c)
        z1, z3 = SurfacePoint(t1[0], b1[0]), SurfacePoint(t3[0], b3[0])
    phases.append({"regime": regime, "start": float(phase_start), "end": float(grid[-1])})
    return CouplingRun(
        times=grid, regimes=regimes, rho=rho, chord=chord, z1=pos1, z3=pos3, phases=phases,
        coupling_time=None if coupling_time is None else float(coupling_time), fallbacks=fallbacks,
        coalescence_radius=deltas,
    )


def tv_decay_estimate(traj: FlowTrajectory, cfg: CouplingConfig, start_pair, k_list, N: int, conv=HALF, seed: int = 0,
                      dt: float = 2.5e-3, runs: list | None = None) -> dict:
    """P(no coalescence within a window of length k) for each k, from N coupled runs.

    By the coupling inequality this bounds the total variation between the
    laws of the two motions at the end of the window.
    """
    if N < 10:
        raise InsufficientRuns(f"need at least 10 runs, got {N}")
    k_list = np.asarray(k_list, dtype=float)
    u_end = cfg.N_start + float(k_list.max())
    lo, hi = traj.backward_time_range()
    if u_end > hi + 1e-12:
        raise ValueError("window does not fit in the trajectory")
    if runs is None:
        runs = [run_coupling_schedule(traj, cfg, start_pair[0], start_pair[1], conv, seed, i, u_end=u_end, dt=dt)
                for i in range(N)]
    times = np.array([np.inf if r.coupling_time is None else r.coupling_time for r in runs])
    p_none = np.array([float(np.mean(times > cfg.N_start + k + 1e-12)) for k in k_list])
    ok = (k_list > 0) & (p_none > 0)
    slope = intercept = r2 = float("nan")
    if ok.sum() >= 2:
        fit = stats.linregress(k_list[ok], np.log(p_none[ok]))
        slope, intercept, r2 = float(fit.slope), float(fit.intercept), float(fit.rvalue**2)
    return {
        "k": k_list.tolist(),
        "p_no_coalescence": p_none.tolist(),
        "coupling_probability": (1.0 - p_none).tolist(),
        "log_slope": slope,
        "log_intercept": intercept,
        "log_r2": r2,
        "n_runs": len(runs),
        "fallbacks": int(sum(r.fallbacks for r in runs)),
        "config": cfg.to_dict(),
        "c": GeneratorConvention.parse(conv).c,
    }


def summary_json(report: dict) -> str:
    return json.dumps(report, indent=1, default=float)
