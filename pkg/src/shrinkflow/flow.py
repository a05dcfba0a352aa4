"""Mean curvature flow of convex triangle meshes and the resulting metric family.

Vertices move in a Lagrangian way with fixed connectivity, so a trajectory is
simply a stack of vertex arrays; each stacked slice, through its edge lengths,
is one metric g(t) of the family.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .errors import (
    ConvexityLost,
    NotEnoughSnapshots,
    OutOfRange,
    SliceOutOfRange,
    StepRejected,
)
from .mesh import Topology, TriangulatedHypersurface, in_convex_position, read_off, validate_convex_mesh, write_off

log = logging.getLogger(__name__)

QUALITY_LIMIT = 50.0
DT_SAFETY = 0.2


# ---------------------------------------------------------------------- stepping
def triangle_quality(mesh: TriangulatedHypersurface) -> np.ndarray:
    """Circumradius over twice the inradius; 1 for equilateral triangles."""
    p = mesh.corners
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    area = mesh.triangle_areas
    s = 0.5 * (a + b + c)
    with np.errstate(divide="ignore"):
        return (a * b * c / (4.0 * area)) / (2.0 * area / s)


def mcf_step(mesh: TriangulatedHypersurface, dt: float, scheme: str = "semi-implicit") -> TriangulatedHypersurface:
    """Advance the surface by one flow step ∂_t F = ΔF."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return mesh
    x = mesh.vertices
    if scheme == "explicit":
        new = x + dt * mesh.laplacian_of_position
    elif scheme == "semi-implicit":
        # (A + dt S) X_new = A X_old  <=>  (I - dt L) X_new = X_old with L = -A^{-1} S
        a = mesh.vertex_areas
        lhs = (sparse.diags(a) + dt * mesh.stiffness).tocsr()
        rhs = a[:, None] * x
        precond = sparse.diags(1.0 / lhs.diagonal())
        cols = []
        for k in range(3):
            sol, info = splinalg.cg(lhs, rhs[:, k], x0=x[:, k], rtol=1e-12, atol=0.0, M=precond, maxiter=2000)
            if info != 0:
                sol = splinalg.spsolve(lhs.tocsc(), rhs[:, k])
            cols.append(sol)
        new = np.column_stack(cols)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    out = mesh.with_vertices(new, check=False)
    areas = out.triangle_areas
    if np.any(areas <= 0) or np.any(np.einsum("ij,ij->i", out._cross, mesh._cross) <= 0):
        raise StepRejected("triangle inverted")
    q = triangle_quality(out)
    if np.max(q) > QUALITY_LIMIT:
        raise StepRejected(f"triangle quality {np.max(q):.1f} exceeds {QUALITY_LIMIT}")
    return out


# ---------------------------------------------------------------------- sphere oracle
@dataclass(frozen=True)
class SphereOracle:
    """Closed forms for the round sphere of initial radius R0 in R^{n+1}."""

    R0: float
    n: int = 2

    def __post_init__(self):
        if self.R0 <= 0 or self.n < 2:
            raise ValueError("need R0 > 0 and n >= 2")

    @property
    def T_c(self) -> float:
        return self.R0**2 / (2 * self.n)

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t >= self.T_c):
            raise OutOfRange(f"t must lie in [0, {self.T_c})")
        return t

    def radius(self, t):
        t = self._check(t)
        return np.sqrt(self.R0**2 - 2 * self.n * t)

    def embed(self, t, x):
        """F(t, x) for x on the initial sphere (centered at the origin)."""
        return (self.radius(t) / self.R0) * np.asarray(x, dtype=float)

    def laplacian_scale(self, t):
        """Δ_{g(t)} = laplacian_scale(t) · Δ_{g(0)}."""
        t = self._check(t)
        return self.R0**2 / (self.R0**2 - 2 * self.n * t)

    def area(self, t):
        """Area of the sphere of radius r(t) (n = 2 surface measure)."""
        return 4.0 * np.pi * self.radius(t) ** 2

    def mean_curvature(self, t):
        return self.n / self.radius(t)

    def phi(self, s):
        """Time change with φ(0) = T_c; maps s ≤ 0 into (0, T_c]."""
        return self.T_c * np.exp(np.asarray(s, dtype=float) / (2 * self.T_c))

    def phi_inverse(self, u):
        return 2 * self.T_c * np.log(np.asarray(u, dtype=float) / self.T_c)

    def psi(self, t):
        """Area-normalizing dilation ψ(t) = R0 / r(t)."""
        return self.R0 / self.radius(t)

    def normalized_time(self, t):
        """t̃(t) = ∫_0^t ψ² = -T_c ln(1 - t/T_c)."""
        t = self._check(t)
        return -self.T_c * np.log1p(-t / self.T_c)


def sphere_oracle(R0: float, n: int = 2) -> SphereOracle:
    return SphereOracle(float(R0), int(n))


# ---------------------------------------------------------------------- trajectory
@dataclass
class FlowTrajectory:
    """Snapshots of the flow with shared connectivity plus derived time maps."""

    topology: Topology
    times: np.ndarray
    positions: np.ndarray  # (n_snapshots, n_vertices, 3)
    t_explosion_estimate: float = float("nan")
    time_step_log: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    psi: np.ndarray | None = None
    normalized_time: np.ndarray | None = None  # t̃ at each snapshot time
    areas: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        if self.areas is None:
            self.areas = np.array([self.snapshot(i).area for i in range(len(self.times))])
        self._cache: dict[float, TriangulatedHypersurface] = {}

    def __len__(self) -> int:
        return len(self.times)

    @property
    def t_last(self) -> float:
        return float(self.times[-1])

    @property
    def initial(self) -> TriangulatedHypersurface:
        return self.snapshot(0)

    def snapshot(self, i: int) -> TriangulatedHypersurface:
        return TriangulatedHypersurface(self.positions[i], self.topology.triangles, topology=self.topology, check=False)

    def slice_at(self, t: float) -> TriangulatedHypersurface:
        return slice_at(self, t)

    # backward parameterization: simulator time u means slice T_c - u
    def backward_time_range(self) -> tuple[float, float]:
        return self.t_explosion_estimate - self.t_last, self.t_explosion_estimate

    def backward_slice(self, u: float) -> TriangulatedHypersurface:
        t = self.t_explosion_estimate - u
        if t < -1e-12 or t > self.t_last + 1e-12:
            lo, hi = self.backward_time_range()
            raise SliceOutOfRange(f"backward time {u:.6g} outside [{lo:.6g}, {hi:.6g}]")
        return slice_at(self, min(max(t, 0.0), self.t_last))

    # time maps -----------------------------------------------------------
    def _need_maps(self):
        if self.psi is None or self.normalized_time is None:
            raise NotEnoughSnapshots("time maps not computed; call normalize_and_time_maps")

    def tilde(self, t):
        """t̃(t) by linear interpolation of the trapezoid table."""
        self._need_maps()
        return np.interp(t, self.times, self.normalized_time)

    def tilde_inverse(self, s):
        self._need_maps()
        return np.interp(s, self.normalized_time, self.times)

    def tau(self, u):
        """τ(u) = -t̃(T_c - u) for backward times u."""
        return -self.tilde(self.t_explosion_estimate - np.asarray(u, dtype=float))

    def tau_inverse(self, v):
        return self.t_explosion_estimate - self.tilde_inverse(-np.asarray(v, dtype=float))

    # persistence ---------------------------------------------------------
    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = []
        for i in range(len(self)):
            name = f"snapshot_{i:05d}.off"
            write_off(self.snapshot(i), d / name)
            names.append(name)
        manifest = {
            "times": self.times.tolist(),
            "areas": self.areas.tolist(),
            "snapshots": names,
            "t_explosion_estimate": self.t_explosion_estimate,
            "psi": None if self.psi is None else self.psi.tolist(),
            "tilde_t": None if self.normalized_time is None else self.normalized_time.tolist(),
            "tau": None if self.normalized_time is None else (-self.normalized_time).tolist(),
            "tau_backward_times": (self.t_explosion_estimate - self.times).tolist(),
            "time_step_log": self.time_step_log,
            "config": self.config,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory) -> "FlowTrajectory":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        first = read_off(d / manifest["snapshots"][0])
        pos = [first.vertices] + [read_off(d / name).vertices for name in manifest["snapshots"][1:]]
        traj = cls(
            topology=first.topology,
            times=np.array(manifest["times"]),
            positions=np.stack(pos),
            t_explosion_estimate=manifest["t_explosion_estimate"],
            time_step_log=manifest.get("time_step_log", []),
            config=manifest.get("config", {}),
            areas=np.array(manifest["areas"]),
        )
        if manifest.get("psi") is not None:
            traj.psi = np.array(manifest["psi"])
            traj.normalized_time = np.array(manifest["tilde_t"])
        return traj


def slice_at(traj: FlowTrajectory, t: float) -> TriangulatedHypersurface:
    """Linear interpolation of vertex positions between bracketing snapshots."""
    times = traj.times
    if t < times[0] or t > times[-1]:
        raise OutOfRange(f"t = {t} outside [{times[0]}, {times[-1]}]")
    cached = traj._cache.get(t)
    if cached is not None:
        return cached
    i = int(np.searchsorted(times, t, side="right")) - 1
    if i >= len(times) - 1 or times[i] == t:
        pos = traj.positions[min(i, len(times) - 1)]
    else:
        w = (t - times[i]) / (times[i + 1] - times[i])
        pos = (1.0 - w) * traj.positions[i] + w * traj.positions[i + 1]
    mesh = TriangulatedHypersurface(pos, traj.topology.triangles, topology=traj.topology, check=False)
    if len(traj._cache) > 8:
        traj._cache.clear()
    traj._cache[t] = mesh
    return mesh


def estimate_explosion_time(times: np.ndarray, areas: np.ndarray, tail_fraction: float = 0.25) -> float:
    """Fit area(t) linearly over the last part of the run and solve area = 0."""
    times = np.asarray(times)
    areas = np.asarray(areas)
    if len(times) < 2:
        return float("nan")
    t0 = times[-1] - tail_fraction * (times[-1] - times[0])
    sel = times >= t0
    if sel.sum() < 2:
        sel = np.zeros_like(sel)
        sel[-2:] = True
    slope, intercept = np.polyfit(times[sel], areas[sel], 1)
    if slope >= 0:
        return float("inf")
    return float(-intercept / slope)


def run_flow(
    mesh0: TriangulatedHypersurface,
    dt0: float = 1e-4,
    stop_area_fraction: float = 0.05,
    scheme: str = "semi-implicit",
    record_every: int = 1,
    safety: float = DT_SAFETY,
    check_convexity_every: int = 10,
    max_steps: int = 1_000_000,
) -> FlowTrajectory:
    """Flow until the area drops to ``stop_area_fraction`` of the initial area."""
    if not 0 < stop_area_fraction <= 1:
        raise ValueError("stop_area_fraction must lie in (0, 1]")
    report = validate_convex_mesh(mesh0)
    if not report.strictly_convex:
        raise ConvexityLost(f"initial mesh is not strictly convex (min indicator {report.min_indicator:.3g})")
    area0 = mesh0.area
    times, positions, areas = [0.0], [mesh0.vertices], [area0]
    steps_log = []
    mesh, t, step = mesh0, 0.0, 0
    while mesh.area > stop_area_fraction * area0 and step < max_steps:
        h_max = float(mesh.mean_curvature.max())
        dt = min(dt0, safety / h_max**2)
        while True:
            try:
                new = mcf_step(mesh, dt, scheme)
                break
            except StepRejected as exc:
                log.debug("step rejected at t=%g (%s); halving dt", t, exc)
                dt *= 0.5
                if dt < 1e-14:
                    raise
        if new.area >= mesh.area:
            raise ConvexityLost(f"area failed to decrease at t={t:.6g}")
        mesh, t, step = new, t + dt, step + 1
        steps_log.append(dt)
        if check_convexity_every and step % check_convexity_every == 0:
            if not in_convex_position(mesh):
                raise ConvexityLost(f"vertices left convex position at t={t:.6g}")
        done = mesh.area <= stop_area_fraction * area0
        if step % record_every == 0 or done:
            times.append(t)
            positions.append(mesh.vertices)
            areas.append(mesh.area)
    traj = FlowTrajectory(
        topology=mesh0.topology,
        times=np.array(times),
        positions=np.stack(positions),
        time_step_log=[float(min(steps_log)), float(max(steps_log)), len(steps_log)] if steps_log else [],
        config={"dt0": dt0, "stop_area_fraction": stop_area_fraction, "scheme": scheme, "record_every": record_every},
        areas=np.array(areas),
    )
    traj.t_explosion_estimate = estimate_explosion_time(traj.times, traj.areas) if len(traj) > 1 else float("nan")
    return traj


def normalize_and_time_maps(traj: FlowTrajectory) -> FlowTrajectory:
    """Fill ψ (area-preserving dilation), t̃ = ∫ψ² and hence τ."""
    if len(traj) < 2:
        raise NotEnoughSnapshots("need at least two snapshots")
    psi = np.sqrt(traj.areas[0] / traj.areas)
    sq = psi**2
    tilde = np.concatenate([[0.0], np.cumsum(0.5 * (sq[1:] + sq[:-1]) * np.diff(traj.times))])
    traj.psi = psi
    traj.normalized_time = tilde
    return traj


def sphere_trajectory(mesh0: TriangulatedHypersurface, times, n: int = 2) -> FlowTrajectory:
    """Exact flow of a sphere mesh centered at the origin: homothetic shrinking.

    The radius is read from the mean vertex norm of ``mesh0``.
    """
    R0 = float(np.linalg.norm(mesh0.vertices, axis=1).mean())
    oracle = SphereOracle(R0, n)
    times = np.asarray(times, dtype=float)
    scale = oracle.radius(times) / R0
    pos = scale[:, None, None] * mesh0.vertices[None]
    traj = FlowTrajectory(
        topology=mesh0.topology,
        times=times,
        positions=pos,
        t_explosion_estimate=oracle.T_c,
        config={"kind": "sphere-oracle", "R0": R0, "n": n},
        areas=mesh0.area * scale**2,
    )
    return normalize_and_time_maps(traj)


def flow_diagnostics(traj: FlowTrajectory) -> dict:
    """Normalized curvature pinching H̃_max - H̃_min along t̃ and its log-linear fit."""
    if traj.psi is None:
        normalize_and_time_maps(traj)
    spread = []
    for i in range(len(traj)):
        h = traj.snapshot(i).mean_curvature / traj.psi[i]
        spread.append(float(h.max() - h.min()))
    spread = np.array(spread)
    s = traj.normalized_time
    ok = spread > 0
    slope, intercept = np.polyfit(s[ok], np.log(spread[ok]), 1)
    resid = np.log(spread[ok]) - (slope * s[ok] + intercept)
    r2 = 1.0 - resid.var() / np.log(spread[ok]).var()
    return {"tilde_t": s, "pinching": spread, "log_slope": float(slope), "log_r2": float(r2)}


def radial_extents(mesh: TriangulatedHypersurface) -> np.ndarray:
    """Extent of the surface along each coordinate axis."""
    v = mesh.vertices
    return v.max(axis=0) - v.min(axis=0)


def max_nesting_distance(inner: TriangulatedHypersurface, outer: TriangulatedHypersurface) -> float:
    """Max over inner vertices of the signed distance to the convex outer surface.

    Negative means every vertex of ``inner`` lies strictly inside ``outer``.
    """
    n = outer.triangle_normals
    offs = np.einsum("ij,ij->i", n, outer.corners[:, 0])
    best = -np.inf
    for chunk in np.array_split(inner.vertices, max(1, len(inner.vertices) // 512)):
        d = chunk @ n.T - offs[None, :]
        best = max(best, float(d.max(axis=1).max()))
    return best
