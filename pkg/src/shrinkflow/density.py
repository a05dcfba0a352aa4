"""Backward density equation ∂_u h + H² h = c Δ h on the evolving slices.

Densities are per-vertex values with respect to the lumped vertex areas of
slice ``M_{T_c - u}``. The default scheme is the Lagrangian weak form

    A(u+dt) h(u+dt) + dt·c·S(u+dt) h(u+dt) = A(u) h(u),

which conserves Σ h·a exactly (S has zero row and column sums): the H² term
appears through the change of the lumped measure, (a(u+dt) - a(u))/(dt·a),
which is the discrete H² for Lagrangian vertices. The ``potential`` scheme
writes the potential explicitly,

    (A + dt·c·S + dt·A·H²)(u+dt) h(u+dt) = A(u+dt) h(u),

and conserves mass only up to the consistency error between H² and the
measure rate.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .brownian import HALF, GeneratorConvention, simulate_ensemble, time_grid
from .errors import SolverFailure
from .flow import FlowTrajectory
from .geodesic import SurfacePoint
from .sampling import CellPartition, path_rng, tv_distance

RESIDUAL_TOL = 1e-10
SCHEMES = ("conservative", "potential")


@dataclass
class DensityField:
    t: float
    values: np.ndarray
    measure: np.ndarray

    @property
    def mass(self) -> float:
        return float(np.dot(self.values, self.measure))

    def l1_distance(self, other: "DensityField") -> float:
        return float(np.dot(np.abs(self.values - other.values), self.measure))


def assemble(traj: FlowTrajectory, u: float) -> dict:
    """Stiffness, lumped mass and H² potential on the slice at backward time u."""
    mesh = traj.backward_slice(u)
    h = mesh.mean_curvature
    return {"stiffness": mesh.stiffness, "mass": mesh.vertex_areas.copy(), "potential": h * h, "mesh": mesh}


def uniform_density(traj: FlowTrajectory, u: float) -> DensityField:
    a = traj.backward_slice(u).vertex_areas
    return DensityField(u, np.full(len(a), 1.0 / a.sum()), a.copy())


def delta_density(traj: FlowTrajectory, u: float, vertex: int) -> DensityField:
    a = traj.backward_slice(u).vertex_areas
    h = np.zeros(len(a))
    h[vertex] = 1.0 / a[vertex]
    return DensityField(u, h, a.copy())


def density_from_values(traj: FlowTrajectory, u: float, values) -> DensityField:
    """Normalize arbitrary non-negative vertex values to unit mass."""
    a = traj.backward_slice(u).vertex_areas
    v = np.asarray(values, dtype=float)
    if v.shape != a.shape or np.any(v < 0):
        raise ValueError("values must be non-negative, one per vertex")
    return DensityField(u, v / np.dot(v, a), a.copy())


def step_density(h: DensityField, dt: float, traj: FlowTrajectory, conv=HALF, scheme: str = "conservative") -> DensityField:
    """One implicit Euler step from h.t to h.t + dt."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return DensityField(h.t, h.values.copy(), h.measure.copy())
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    c = GeneratorConvention.parse(conv).c
    ops = assemble(traj, h.t + dt)
    a_new = ops["mass"]
    lhs = sparse.diags(a_new) + dt * c * ops["stiffness"]
    if scheme == "conservative":
        rhs = h.measure * h.values
    else:
        lhs = lhs + sparse.diags(dt * a_new * ops["potential"])
        rhs = a_new * h.values
    lhs = lhs.tocsc()
    sol = splinalg.spsolve(lhs, rhs)
    resid = np.linalg.norm(lhs @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if not np.isfinite(resid) or resid > RESIDUAL_TOL:
        raise SolverFailure(f"linear solve residual {resid:.3g}")
    return DensityField(h.t + dt, sol, a_new)


def solve_density(traj: FlowTrajectory, h0: DensityField, u_end: float, dt: float, conv=HALF,
                  scheme: str = "conservative", keep: bool = True, grid=None) -> list[DensityField]:
    """Integrate from h0.t to u_end; returns every field (or the first and last)."""
    grid = time_grid(h0.t, u_end, dt) if grid is None else np.asarray(grid)
    out = [h0]
    h = h0
    for u0, u1 in zip(grid[:-1], grid[1:]):
        h = step_density(h, u1 - u0, traj, conv, scheme)
        if keep:
            out.append(h)
    if not keep and len(grid) > 1:
        out.append(h)
    return out


def sphere_profile_error(fields: list[DensityField]) -> float:
    """Max pointwise relative deviation from the uniform profile 1/area."""
    return max(float(np.max(np.abs(f.values * f.measure.sum() - 1.0))) for f in fields)


def uniqueness_experiment(traj: FlowTrajectory, h_a: DensityField, h_b: DensityField, u_end: float, dt: float,
                          conv=HALF, scheme: str = "conservative", grid=None) -> dict:
    """Evolve two normalized initial data together and record their L¹(dμ) distance."""
    if abs(h_a.t - h_b.t) > 1e-15:
        raise ValueError("initial data must share the start time")
    grid = time_grid(h_a.t, u_end, dt) if grid is None else np.asarray(grid)
    a, b = h_a, h_b
    times, dist, mass_a, mass_b = [a.t], [a.l1_distance(b)], [a.mass], [b.mass]
    for u0, u1 in zip(grid[:-1], grid[1:]):
        a = step_density(a, u1 - u0, traj, conv, scheme)
        b = step_density(b, u1 - u0, traj, conv, scheme)
        times.append(a.t)
        dist.append(a.l1_distance(b))
        mass_a.append(a.mass)
        mass_b.append(b.mass)
    dist = np.array(dist)
    return {
        "times": np.array(times),
        "l1": dist,
        "non_increasing": bool(np.all(np.diff(dist) <= 1e-12)),
        "mass_a": np.array(mass_a),
        "mass_b": np.array(mass_b),
        "final_a": a,
        "final_b": b,
    }


def sample_starts(h: DensityField, traj: FlowTrajectory, N: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Start points drawn from the vertex masses h·a; each start sits on its vertex."""
    mesh = traj.backward_slice(h.t)
    p = np.clip(h.values * h.measure, 0.0, None)
    p /= p.sum()
    rng = path_rng(seed, -1 % (2**63))
    verts = rng.choice(len(p), size=N, p=p)
    pts = [SurfacePoint.vertex(mesh, int(v)) for v in verts]
    return np.array([q.triangle for q in pts]), np.array([q.bary for q in pts])


def feynman_kac_check(traj: FlowTrajectory, h_eps: DensityField, t_star: float, N: int, conv=HALF, seed: int = 0,
                      dt_pde: float = 1e-4, dt_mc: float = 1e-4, cells_subdiv: int = 2,
                      scheme: str = "conservative", min_paths: int = 1000) -> dict:
    """Compare the solved density at t_star with the law of simulated paths.

    Simulated end points are spread onto the vertices of their triangle with
    their barycentric weights (the P1 load, whose expectation is ∫φ_v h dμ ≈
    h_v a_v). Both vertex laws are then binned on a coarse radial partition
    of the slice at t_star and compared in total variation.
    """
    conv = GeneratorConvention.parse(conv)
    eps = h_eps.t
    fields = solve_density(traj, h_eps, t_star, dt_pde, conv, scheme, keep=False)
    h_star = fields[-1]
    mesh = traj.backward_slice(t_star)
    cells = CellPartition(mesh, cells_subdiv)
    vertex_cells = cells.assign(mesh.vertices)
    pde_law = np.bincount(vertex_cells, weights=np.clip(h_star.values, 0, None) * h_star.measure, minlength=cells.n_cells)
    tri0, bary0 = sample_starts(h_eps, traj, N, seed)
    ens = simulate_ensemble(traj, (tri0, bary0), time_grid(eps, t_star, dt_mc), conv, seed,
                            path_ids=np.arange(N), record_every=None)
    tri, bary = ens.final_points()
    load = np.bincount(mesh.triangles[tri].ravel(), weights=np.asarray(bary).ravel(), minlength=len(mesh.vertices))
    mc_law = np.bincount(vertex_cells, weights=load, minlength=cells.n_cells)
    insufficient = N < min_paths
    if insufficient:
        warnings.warn(f"only {N} paths; TV estimate is dominated by sampling noise", RuntimeWarning, stacklevel=2)
    return {
        "eps": float(eps),
        "t_star": float(t_star),
        "n_paths": N,
        "cells": cells.n_cells,
        "tv": tv_distance(pde_law, mc_law),
        "pde_mass": h_star.mass,
        "insufficient_paths": insufficient,
        "c": conv.c,
    }


def write_density_csv(path, fields: list[DensityField]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "vertex", "h", "area"])
        for f in fields:
            for v, (h, a) in enumerate(zip(f.values, f.measure)):
                w.writerow([repr(float(f.t)), v, repr(float(h)), repr(float(a))])
