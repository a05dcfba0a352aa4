"""Brownian motion for the time-dependent metrics of a flow trajectory.

Simulator time ``u`` is backward time: the process at time ``u`` lives on the
slice ``M_{T_c - u}``. Paths are advanced by a geodesic random walk: a tangent
Gaussian with covariance ``2c dt I`` in a carried orthonormal frame, followed by
a straight walk on the current slice. Because vertices are Lagrangian a point
keeps its (triangle, barycentric) label when the slice changes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InsufficientPaths, StepTooLong
from .flow import FlowTrajectory, SphereOracle, sphere_trajectory
from .geodesic import SurfacePoint, reorthonormalize, tangent_frame, walk_batch
from .mesh import icosphere
from .sampling import CellPartition, NoiseSource, chunk_indices, occupancy_density, parallel_map, tv_distance

MAX_STEP_FRACTION = 0.5
NOISE_BLOCK = 256


@dataclass(frozen=True)
class GeneratorConvention:
    """Generator c·Δ_g; c = 1/2 is the probabilistic normalization."""

    c: float = 0.5

    def __post_init__(self):
        if self.c not in (0.5, 1.0):
            raise ValueError("generator coefficient must be 1/2 or 1")

    @property
    def name(self) -> str:
        return "half" if self.c == 0.5 else "one"

    @classmethod
    def parse(cls, value) -> "GeneratorConvention":
        if isinstance(value, GeneratorConvention):
            return value
        names = {"half": 0.5, "1/2": 0.5, "0.5": 0.5, "one": 1.0, "1": 1.0, "1.0": 1.0}
        if isinstance(value, str):
            if value.lower() not in names:
                raise ValueError(f"unknown convention {value!r}")
            return cls(names[value.lower()])
        return cls(float(value))

    def qv_slope(self, n: int = 2) -> float:
        """d⟨Y, Y⟩/dt for the ambient image of the motion."""
        return 2.0 * self.c * n


HALF = GeneratorConvention(0.5)
ONE = GeneratorConvention(1.0)


@dataclass
class BMPath:
    times: np.ndarray
    points: list
    frame: np.ndarray
    rng_stream_id: tuple
    ambient: np.ndarray | None = None


@dataclass
class AmbientPath:
    times: np.ndarray
    positions: np.ndarray


@dataclass
class Ensemble:
    """A batch of paths on a common time grid; arrays are indexed [path, sample]."""

    times: np.ndarray
    triangles: np.ndarray
    bary: np.ndarray
    positions: np.ndarray
    frames: np.ndarray
    path_ids: np.ndarray
    convention: GeneratorConvention
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.path_ids)

    def path(self, i: int) -> BMPath:
        pts = [SurfacePoint(t, b) for t, b in zip(self.triangles[i], self.bary[i])]
        return BMPath(self.times.copy(), pts, self.frames[i].copy(), (self.seed, int(self.path_ids[i])), self.positions[i].copy())

    def final_points(self) -> tuple[np.ndarray, np.ndarray]:
        return self.triangles[:, -1], self.bary[:, -1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "t", "x", "y", "z", "triangle", "b0", "b1", "b2"])
            for i, pid in enumerate(self.path_ids):
                for k, t in enumerate(self.times):
                    x = self.positions[i, k]
                    b = self.bary[i, k]
                    w.writerow([int(pid), repr(float(t)), repr(float(x[0])), repr(float(x[1])), repr(float(x[2])),
                                int(self.triangles[i, k]), repr(float(b[0])), repr(float(b[1])), repr(float(b[2]))])


# ---------------------------------------------------------------------- grids
def time_grid(u0: float, u1: float, dt: float, rel: float | None = None) -> np.ndarray:
    """Grid from u0 to u1 with step dt, or min(dt, rel·u) when ``rel`` is given."""
    if u1 < u0:
        raise ValueError("u1 < u0")
    if u1 == u0:
        return np.array([u0])
    if rel is None:
        n = max(1, int(math.ceil((u1 - u0) / dt - 1e-9)))
        return np.linspace(u0, u1, n + 1)
    grid = [u0]
    u = u0
    while u < u1 - 1e-15:
        step = min(dt, rel * u) if u > 0 else dt
        u = min(u + step, u1)
        if u1 - u < 1e-3 * step:
            u = u1
        grid.append(u)
    return np.array(grid)


def parse_surface_point(text: str) -> SurfacePoint:
    """"b0,b1,b2@tK" -> SurfacePoint(K, (b0, b1, b2))."""
    try:
        bary_txt, tri_txt = text.split("@")
        bary = [float(x) for x in bary_txt.split(",")]
        tri = int(tri_txt.strip().lstrip("t"))
    except ValueError as exc:
        raise ValueError(f"cannot parse surface point {text!r}") from exc
    return SurfacePoint(tri, np.array(bary) / sum(bary))


# ---------------------------------------------------------------------- stepping
def _step_limit(mesh, max_fraction):
    return max_fraction * float(np.ptp(mesh.vertices, axis=0).max())


def _advance(mesh, tri, bary, frames, xi, dt, c, max_fraction=MAX_STEP_FRACTION):
    """One walk step for a batch on a fixed slice; returns (tri, bary, frames)."""
    frames = reorthonormalize(mesh, tri, frames)
    scale = math.sqrt(2.0 * c * dt)
    v = scale * (xi[:, :1] * frames[:, 0] + xi[:, 1:2] * frames[:, 1])
    if len(v):
        longest = float(np.sqrt((v * v).sum(axis=1)).max())
        if longest > _step_limit(mesh, max_fraction):
            raise StepTooLong(f"step of length {longest:.4g} too long for the slice")
    tri, bary, _, frames = walk_batch(mesh, tri, bary, v, carry=frames)
    return tri, bary, reorthonormalize(mesh, tri, frames)


def gtbm_increment(traj: FlowTrajectory, u: float, p: SurfacePoint, dt: float, conv, rng, frame=None) -> np.ndarray:
    """The tangent step vector that ``gtbm_step`` walks along."""
    conv = GeneratorConvention.parse(conv)
    mesh = traj.backward_slice(u)
    fr = tangent_frame(mesh, [p.triangle]) if frame is None else np.asarray(frame)[None]
    fr = reorthonormalize(mesh, [p.triangle], fr)[0]
    xi = np.asarray(rng.standard_normal(2), dtype=float)
    return math.sqrt(2.0 * conv.c * dt) * (xi[0] * fr[0] + xi[1] * fr[1])


def gtbm_step(traj: FlowTrajectory, u: float, p: SurfacePoint, dt: float, conv, rng, frame=None,
              return_frame: bool = False, max_fraction: float = MAX_STEP_FRACTION):
    """Advance one point by one step of the motion at backward time u."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    conv = GeneratorConvention.parse(conv)
    mesh = traj.backward_slice(u)
    fr = tangent_frame(mesh, [p.triangle]) if frame is None else np.asarray(frame, dtype=float)[None]
    xi = np.asarray(rng.standard_normal(2), dtype=float)[None]
    tri, bary, frames = _advance(mesh, np.array([p.triangle]), p.bary[None], fr, xi, dt, conv.c, max_fraction)
    q = SurfacePoint(tri[0], bary[0])
    return (q, frames[0]) if return_frame else q


def _simulate_chunk(traj, tri0, bary0, grid, c, seed, ids, record_idx, max_fraction):
    noise = NoiseSource(seed, ids)
    n = len(ids)
    tri = np.array(tri0, dtype=np.int64)
    bary = np.array(bary0, dtype=float)
    mesh = traj.backward_slice(grid[0])
    frames = tangent_frame(mesh, tri).reshape(n, 2, 3)
    rec_tri = np.empty((n, len(record_idx)), dtype=np.int64)
    rec_bary = np.empty((n, len(record_idx), 3))
    rec_pos = np.empty((n, len(record_idx), 3))
    slot = {k: j for j, k in enumerate(record_idx)}

    def record(k, mesh):
        j = slot.get(k)
        if j is not None:
            rec_tri[:, j] = tri
            rec_bary[:, j] = bary
            rec_pos[:, j] = mesh.point_position(tri, bary)

    record(0, mesh)
    steps = len(grid) - 1
    xi_block, block_start = None, 0
    for k in range(steps):
        if xi_block is None or k - block_start >= xi_block.shape[1]:
            block_start = k
            xi_block = noise.draw(min(NOISE_BLOCK, steps - k))
        xi = xi_block[:, k - block_start]
        tri, bary, frames = _advance(mesh, tri, bary, frames, xi, grid[k + 1] - grid[k], c, max_fraction)
        mesh = traj.backward_slice(grid[k + 1])
        record(k + 1, mesh)
    return rec_tri, rec_bary, rec_pos, frames


def simulate_ensemble(
    traj: FlowTrajectory,
    starts,
    grid,
    conv=HALF,
    seed: int = 0,
    path_ids=None,
    record_every: int | None = 1,
    workers: int | None = 1,
    max_fraction: float = MAX_STEP_FRACTION,
) -> Ensemble:
    """Simulate many paths on the common backward-time grid.

    ``starts`` is a SurfacePoint (shared start) or a pair of arrays
    (triangles, bary). ``record_every=None`` keeps only the first and last
    samples. Path ``i`` draws its noise from the stream (seed, path_ids[i]).
    """
    conv = GeneratorConvention.parse(conv)
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    if isinstance(starts, SurfacePoint):
        if path_ids is None:
            raise ValueError("path_ids (or a start array) required for a shared start")
        path_ids = np.asarray(path_ids)
        tri0 = np.full(len(path_ids), starts.triangle)
        bary0 = np.tile(starts.bary, (len(path_ids), 1))
    else:
        tri0, bary0 = (np.asarray(a) for a in starts)
        path_ids = np.arange(len(tri0)) if path_ids is None else np.asarray(path_ids)
    steps = len(grid) - 1
    if record_every is None:
        record_idx = sorted({0, steps})
    else:
        record_idx = sorted(set(range(0, steps + 1, record_every)) | {steps})
    chunks = chunk_indices(len(path_ids), max(1, (workers or 1)))
    results = parallel_map(
        lambda idx: _simulate_chunk(traj, tri0[idx], bary0[idx], grid, conv.c, seed, path_ids[idx], record_idx, max_fraction),
        chunks,
        workers,
    )
    return Ensemble(
        times=grid[record_idx],
        triangles=np.concatenate([r[0] for r in results]),
        bary=np.concatenate([r[1] for r in results]),
        positions=np.concatenate([r[2] for r in results]),
        frames=np.concatenate([r[3] for r in results]),
        path_ids=path_ids,
        convention=conv,
        seed=seed,
        meta={"dt_max": float(np.diff(grid).max()) if steps else 0.0, "steps": steps},
    )


def simulate_path(traj: FlowTrajectory, start: SurfacePoint, t0: float, t1: float, dt: float, conv=HALF,
                  rng=None, seed: int = 0, path_index: int = 0) -> BMPath:
    """One path on the uniform grid from t0 to t1 (backward times).

    With ``rng`` given, its ``standard_normal`` drives the path; otherwise
    the stream (seed, path_index) is used.
    """
    conv = GeneratorConvention.parse(conv)
    grid = time_grid(t0, t1, dt)
    if rng is None:
        ens = simulate_ensemble(traj, start, grid, conv, seed, path_ids=[path_index])
        return ens.path(0)
    p, frame = start, None
    pts = [p]
    for k in range(len(grid) - 1):
        p, frame = gtbm_step(traj, grid[k], p, grid[k + 1] - grid[k], conv, rng, frame=frame, return_frame=True)
        pts.append(p)
    if frame is None:
        frame = tangent_frame(traj.backward_slice(grid[0]), [p.triangle])[0]
    return BMPath(grid, pts, frame, ("external",))


def pushforward_Y(traj: FlowTrajectory, path) -> AmbientPath:
    """Ambient image Y_u = F(T_c - u, X_u) of a path or of every path in an ensemble."""
    if isinstance(path, Ensemble):
        pos = np.empty_like(path.positions)
        for k, u in enumerate(path.times):
            pos[:, k] = traj.backward_slice(u).point_position(path.triangles[:, k], path.bary[:, k])
        return AmbientPath(path.times.copy(), pos)
    pos = np.array([traj.backward_slice(u).point_position(p.triangle, p.bary) for u, p in zip(path.times, path.points)])
    return AmbientPath(np.asarray(path.times).copy(), pos)


# ---------------------------------------------------------------------- verification
def martingale_qv_test(times, Y, conv=HALF, n: int = 2, window=None) -> dict:
    """Drift z-scores and quadratic-variation slope of ambient paths Y[path, sample, 3]."""
    conv = GeneratorConvention.parse(conv)
    Y = np.asarray(Y)
    times = np.asarray(times)
    if Y.shape[0] < 100:
        raise InsufficientPaths(f"need at least 100 paths, got {Y.shape[0]}")
    lo, hi = (times[0], times[-1]) if window is None else window
    sel = np.flatnonzero((times >= lo - 1e-12) & (times <= hi + 1e-12))
    a, b = sel[0], sel[-1]
    inc = Y[:, b] - Y[:, a]
    se = inc.std(axis=0, ddof=1) / math.sqrt(len(inc))
    z = inc.mean(axis=0) / se
    dq = np.sum(np.diff(Y[:, sel], axis=1) ** 2, axis=2)
    q = np.concatenate([[0.0], np.cumsum(dq.mean(axis=0))])
    el = times[sel] - times[a]
    fit = stats.linregress(el, q)
    return {
        "window": [float(times[a]), float(times[b])],
        "n_paths": int(Y.shape[0]),
        "drift_z_scores": z.tolist(),
        "qv_slope": float(fit.slope),
        "qv_expected": conv.qv_slope(n),
        "qv_r2": float(fit.rvalue**2),
        "max_norm": float(np.linalg.norm(Y, axis=2).max()),
        "c": conv.c,
    }


def sphere_time_change_check(
    oracle: SphereOracle,
    conv=HALF,
    N: int = 2000,
    seed: int = 0,
    subdiv: int = 3,
    s_min: float | None = None,
    n_increments: int = 10,
    dt: float = 1e-4,
    n_snapshots: int = 400,
) -> dict:
    """Resample the backward motion on the φ clock and compare with round-sphere BM.

    On the φ clock the motion in initial-sphere coordinates is Brownian with
    generator (c/2)·Δ_{g(0)}, so chord angles θ over a clock step Δs satisfy
    θ²/(2cΔs/R0²) ≈ Exp(1) for small Δs. The local quadratic variation per unit
    backward time, in initial coordinates, is 2cn·laplacian_scale(T_c - u).
    """
    conv = GeneratorConvention.parse(conv)
    R0, T_c, n = oracle.R0, oracle.T_c, oracle.n
    mesh0 = icosphere(subdiv, R0)
    traj = sphere_trajectory(mesh0, np.linspace(0.0, T_c * (1 - 1e-3), n_snapshots), n)
    s_min = -T_c if s_min is None else s_min
    s_grid = np.linspace(s_min, 0.0, n_increments + 1)
    u_marks = oracle.phi(s_grid)
    u0 = max(u_marks[0], traj.backward_time_range()[0])
    fine = np.unique(np.concatenate([time_grid(u0, T_c, dt), u_marks]))
    fine = fine[fine >= u0]
    start = SurfacePoint.nearest(mesh0, R0 * np.array([0.36, -0.48, 0.8]))
    ens = simulate_ensemble(traj, start, fine, conv, seed, path_ids=np.arange(N))
    x = mesh0.point_position(ens.triangles, ens.bary)  # initial-sphere coordinates
    idx = np.searchsorted(fine, u_marks)
    xs = x[:, idx]
    ds = np.diff(s_grid)[0]
    cosang = np.einsum("ijk,ijk->ij", xs[:, 1:], xs[:, :-1]) / (
        np.linalg.norm(xs[:, 1:], axis=2) * np.linalg.norm(xs[:, :-1], axis=2))
    theta2 = np.arccos(np.clip(cosang, -1, 1)) ** 2
    scaled = (theta2 / (2 * conv.c * ds / R0**2)).ravel()
    ks = stats.kstest(scaled, "expon")
    # quadratic variation on the φ clock
    qv = np.concatenate([[0.0], np.cumsum(np.mean(np.sum(np.diff(xs, axis=1) ** 2, axis=2), axis=0))])
    qv_fit = stats.linregress(s_grid - s_grid[0], qv)
    # local QV ratio along backward time
    inc2 = np.mean(np.sum(np.diff(x, axis=1) ** 2, axis=2), axis=0)
    du = np.diff(fine)
    mids = 0.5 * (fine[1:] + fine[:-1])
    edges = np.linspace(u0, T_c, 6)
    ratios, expected, centers = [], [], []
    ref_rate = 2 * conv.c * n
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (mids >= lo) & (mids < hi)
        rate = inc2[m].sum() / du[m].sum()
        um = np.average(mids[m], weights=du[m])
        ratios.append(rate / ref_rate)
        # time-averaged scale over the bin; the rate varies smoothly inside
        tt = T_c - mids[m]
        expected.append(float(np.average(oracle.laplacian_scale(np.clip(tt, 0, None)), weights=du[m])))
        centers.append(float(um))
    ratios = np.array(ratios)
    expected = np.array(expected)
    return {
        "c": conv.c,
        "n_paths": N,
        "ks_pvalue": float(ks.pvalue),
        "ks_statistic": float(ks.statistic),
        "phi_qv_slope": float(qv_fit.slope),
        "phi_qv_expected": float(conv.c * n * 1.0),
        "phi_of_zero": float(oracle.phi(0.0)),
        "local_qv_times": centers,
        "local_qv_ratio": ratios.tolist(),
        "laplacian_scale": expected.tolist(),
        "max_ratio_error": float(np.max(np.abs(ratios / expected - 1.0))),
    }


def birthless_law(traj, x0: SurfacePoint, eps: float, t_star: float, N: int, conv=HALF, seed: int = 0,
                  dt: float = 1e-4, rel: float = 0.01, workers: int | None = 1) -> Ensemble:
    """Freeze at x0 until eps, then run the motion up to t_star; final samples only."""
    if not eps < t_star:
        raise ValueError("eps must be smaller than t_star")
    grid = time_grid(eps, t_star, dt, rel)
    return simulate_ensemble(traj, x0, grid, conv, seed, path_ids=np.arange(N), record_every=None, workers=workers)


def birthless_ensemble(traj, x0: SurfacePoint, eps_list, t_star: float, N: int, conv=HALF, seed: int = 0,
                       dt: float = 1e-4, rel: float = 0.01, cells_subdiv: int = 1, workers: int | None = 1) -> dict:
    """Laws at t_star of the processes frozen at x0 until each eps.

    All ensembles share the per-path noise streams, which keeps the
    comparison between consecutive eps sharp. TV distances are computed on a
    coarse radial partition (see CellPartition); per-vertex densities are also
    returned.
    """
    mesh = traj.backward_slice(t_star)
    cells = CellPartition(mesh, cells_subdiv)
    laws, densities = [], []
    for eps in eps_list:
        ens = birthless_law(traj, x0, eps, t_star, N, conv, seed, dt, rel, workers)
        tri, bary = ens.final_points()
        laws.append(cells.histogram(mesh.point_position(tri, bary)))
        densities.append(occupancy_density(mesh, tri, bary))
    return {
        "eps": [float(e) for e in eps_list],
        "t_star": float(t_star),
        "c": GeneratorConvention.parse(conv).c,
        "n_paths": N,
        "cells": cells.n_cells,
        "laws": laws,
        "densities": densities,
        "uniform": cells.uniform,
        "tv_consecutive": [tv_distance(a, b) for a, b in zip(laws[:-1], laws[1:])],
        "tv_uniform": [tv_distance(p, cells.uniform) for p in laws],
    }
