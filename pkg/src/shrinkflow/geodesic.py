"""Intrinsic points, straight walks, geodesics and parallel transport on a slice.

Tangent vectors are ambient 3-vectors lying in the plane of the triangle that
carries their base point.  Crossing an edge rotates them about the edge (the
hinge map), which is the discrete Levi-Civita connection of the polyhedral
metric; straightest walks and shortest geodesics both use it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csgraph

from .errors import AmbiguousGeodesic, BaseMismatch, GeodesicFailure, StepTooLong
from .mesh import TriangulatedHypersurface

BARY_TOL = 1e-12
MAX_STEP_FRACTION = 0.5
AMBIGUITY_RTOL = 1e-6
FAN_SEARCH_FRACTION = 0.25  # fan search for paths longer than this fraction of π/√K_max


@dataclass(frozen=True, eq=False)
class SurfacePoint:
    triangle: int
    bary: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bary, dtype=float).copy()
        if b.shape != (3,):
            raise ValueError("barycentric coordinates must have 3 entries")
        if b.min() < -1e-9 or abs(b.sum() - 1.0) > 1e-9:
            raise ValueError(f"invalid barycentric coordinates {b}")
        b = np.clip(b, 0.0, None)
        b /= b.sum()
        b.setflags(write=False)
        object.__setattr__(self, "bary", b)
        object.__setattr__(self, "triangle", int(self.triangle))

    def position(self, mesh: TriangulatedHypersurface) -> np.ndarray:
        return self.bary @ mesh.corners[self.triangle]

    def __eq__(self, other):
        return (
            isinstance(other, SurfacePoint)
            and self.triangle == other.triangle
            and np.array_equal(self.bary, other.bary)
        )

    def __hash__(self):
        return hash((self.triangle, self.bary.tobytes()))

    @classmethod
    def vertex(cls, mesh: TriangulatedHypersurface, v: int) -> "SurfacePoint":
        f = int(mesh.topology.vertex_triangles[v][0])
        b = (mesh.triangles[f] == v).astype(float)
        return cls(f, b)

    @classmethod
    def vertex_in(cls, mesh: TriangulatedHypersurface, v: int, f: int) -> "SurfacePoint":
        """Vertex v written in the incident triangle f."""
        b = (mesh.triangles[f] == v).astype(float)
        if b.sum() != 1.0:
            raise ValueError(f"vertex {v} is not a corner of triangle {f}")
        return cls(f, b)

    @classmethod
    def centroid(cls, f: int) -> "SurfacePoint":
        return cls(f, np.full(3, 1.0 / 3.0))

    @classmethod
    def nearest(cls, mesh: TriangulatedHypersurface, x) -> "SurfacePoint":
        tri, bary = mesh.locate(np.asarray(x, dtype=float)[None])
        return cls(tri[0], bary[0])


@dataclass(frozen=True)
class TangentVector:
    base: SurfacePoint
    components: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.components, dtype=float).copy()
        c.setflags(write=False)
        object.__setattr__(self, "components", c)

    @classmethod
    def in_plane(cls, mesh: TriangulatedHypersurface, base: SurfacePoint, vec) -> "TangentVector":
        """Project an ambient vector onto the base triangle's plane."""
        n = mesh.triangle_normals[base.triangle]
        v = np.asarray(vec, dtype=float)
        return cls(base, v - np.dot(v, n) * n)

    def norm(self) -> float:
        return float(np.linalg.norm(self.components))


@dataclass
class GeodesicPath:
    """Straightened polyline: ``strip`` lists the triangles it crosses in order."""

    start: SurfacePoint
    end: SurfacePoint
    strip: list[int]
    points: list[SurfacePoint]
    length: float
    initial_tangent: np.ndarray
    final_tangent: np.ndarray
    max_bend: float = 0.0
    corners: list[int] = field(default_factory=list)
    midpoint: np.ndarray | None = None


# ---------------------------------------------------------------------- frames
def tangent_frame(mesh: TriangulatedHypersurface, triangles) -> np.ndarray:
    """Orthonormal (e1, e2) in the planes of the given triangles; shape (..., 2, 3)."""
    tri = np.asarray(triangles)
    p = mesh.corners[tri]
    n = mesh.triangle_normals[tri]
    e1 = p[..., 1, :] - p[..., 0, :]
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(n, e1)
    return np.stack([e1, e2], axis=-2)


def reorthonormalize(mesh: TriangulatedHypersurface, triangles, frames: np.ndarray) -> np.ndarray:
    """Project frames (N, 2, 3) onto current triangle planes and Gram-Schmidt them.

    Keeps the orientation of the first vector and the handedness with respect
    to the outward normal.
    """
    n = mesh.triangle_normals[np.asarray(triangles)]
    e1 = frames[:, 0] - np.einsum("ij,ij->i", frames[:, 0], n)[:, None] * n
    norm = np.linalg.norm(e1, axis=1)
    bad = norm < 1e-14
    if bad.any():
        e1[bad] = tangent_frame(mesh, np.asarray(triangles)[bad])[:, 0]
        norm[bad] = 1.0
    e1 /= norm[:, None]
    e2 = np.cross(n, e1)
    return np.stack([e1, e2], axis=1)


def hinge_rotate(vectors: np.ndarray, edge_dir: np.ndarray, n_from: np.ndarray, n_to: np.ndarray) -> np.ndarray:
    """Rotate vectors about unit ``edge_dir`` so that ``n_from`` maps to ``n_to``.

    ``vectors`` has shape (N, ..., 3); the other arrays (N, 3).
    """
    m_from = np.cross(n_from, edge_dir)
    m_to = np.cross(n_to, edge_dir)
    shape = (len(edge_dir),) + (1,) * (vectors.ndim - 2) + (3,)
    e, mf, mt, nf, nt = (a.reshape(shape) for a in (edge_dir, m_from, m_to, n_from, n_to))
    ce = (vectors * e).sum(-1, keepdims=True)
    cm = (vectors * mf).sum(-1, keepdims=True)
    cn = (vectors * nf).sum(-1, keepdims=True)
    return ce * e + cm * mt + cn * nt


# ---------------------------------------------------------------------- straight walks
def walk_batch(
    mesh: TriangulatedHypersurface,
    triangles: np.ndarray,
    bary: np.ndarray,
    vectors: np.ndarray,
    carry: np.ndarray | None = None,
    max_crossings: int = 100_000,
):
    """Straight walks of length |v| from many points at once.

    Returns ``(triangles, bary, direction, carry)`` where ``direction`` is the
    unit walking direction transported to the end point (zero for zero
    steps) and ``carry`` (N, K, 3) are extra tangent vectors transported
    along each walk.
    """
    tri = np.array(triangles, dtype=np.int64, copy=True)
    b = np.array(bary, dtype=float, copy=True)
    vec = np.asarray(vectors, dtype=float)
    remaining = np.linalg.norm(vec, axis=1)
    direction = np.zeros_like(vec)
    moving = remaining > 0.0
    direction[moving] = vec[moving] / remaining[moving, None]
    carried = None if carry is None else np.array(carry, dtype=float, copy=True)

    grads = mesh.barycentric_gradients
    normals = mesh.triangle_normals
    nbr = mesh.topology.neighbor
    nbr_corner = mesh.topology.neighbor_corner
    verts = mesh.vertices
    tris = mesh.triangles

    active = np.flatnonzero(moving)
    crossings = 0
    while active.size:
        crossings += 1
        if crossings > max_crossings:
            raise RuntimeError("straight walk failed to terminate")
        f = tri[active]
        d = direction[active]
        bb = b[active]
        beta = np.einsum("ikj,ij->ik", grads[f], d)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(beta < -1e-300, -bb / beta, np.inf)
        s = np.maximum(s, 0.0)
        k = np.argmin(s, axis=1)
        s_exit = s[np.arange(active.size), k]
        rem = remaining[active]

        done = s_exit >= rem
        if done.any():
            idx = active[done]
            nb = bb[done] + rem[done, None] * beta[done]
            nb = np.clip(nb, 0.0, None)
            b[idx] = nb / nb.sum(axis=1, keepdims=True)
            remaining[idx] = 0.0

        cross = ~done
        if not cross.any():
            break
        idx = active[cross]
        kc = k[cross]
        fc = f[cross]
        nb = bb[cross] + s_exit[cross, None] * beta[cross]
        nb[np.arange(idx.size), kc] = 0.0
        nb = np.clip(nb, 0.0, None)
        nb /= nb.sum(axis=1, keepdims=True)
        remaining[idx] = rem[cross] - s_exit[cross]

        g = nbr[fc, kc]
        kg = nbr_corner[fc, kc]
        rows = np.arange(idx.size)
        newb = np.zeros_like(nb)
        newb[rows, (kg + 1) % 3] = nb[rows, (kc + 2) % 3]
        newb[rows, (kg + 2) % 3] = nb[rows, (kc + 1) % 3]

        a = verts[tris[fc, (kc + 1) % 3]]
        c = verts[tris[fc, (kc + 2) % 3]]
        e = c - a
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        n_from, n_to = normals[fc], normals[g]
        direction[idx] = hinge_rotate(direction[idx], e, n_from, n_to)
        if carried is not None:
            carried[idx] = hinge_rotate(carried[idx], e, n_from, n_to)
        tri[idx] = g
        b[idx] = newb
        active = idx

    return tri, b, direction, carried


def walk_exponential(
    mesh: TriangulatedHypersurface,
    p: SurfacePoint,
    v: TangentVector,
    max_fraction: float = MAX_STEP_FRACTION,
    return_direction: bool = False,
):
    """Discrete exponential map: walk straight from p along v for length |v|."""
    if v.base != p:
        raise BaseMismatch("tangent vector is not based at p")
    length = v.norm()
    if length > max_fraction * mesh.diameter:
        raise StepTooLong(f"|v| = {length:.4g} exceeds {max_fraction} x diameter")
    n = mesh.triangle_normals[p.triangle]
    comp = v.components - np.dot(v.components, n) * n
    tri, bary, direction, _ = walk_batch(mesh, [p.triangle], p.bary[None], comp[None])
    q = SurfacePoint(tri[0], bary[0])
    if return_direction:
        return q, TangentVector(q, direction[0] * length)
    return q


# ---------------------------------------------------------------------- geodesics
def _unfold(mesh: TriangulatedHypersurface, strip: list[int]):
    """Lay the triangle strip flat; returns per-triangle 2D corners (m, 3, 2)."""
    tris = mesh.triangles
    verts = mesh.vertices
    out = np.empty((len(strip), 3, 2))
    p0 = verts[tris[strip[0]]]
    e1 = p0[1] - p0[0]
    l01 = np.linalg.norm(e1)
    e1 /= l01
    e2 = np.cross(mesh.triangle_normals[strip[0]], e1)
    out[0] = np.array([[0.0, 0.0], [l01, 0.0], [np.dot(p0[2] - p0[0], e1), np.dot(p0[2] - p0[0], e2)]])
    for i in range(1, len(strip)):
        f, g = strip[i - 1], strip[i]
        fv, gv = tris[f], tris[g]
        shared = [c for c in range(3) if gv[c] in fv]
        if len(shared) != 2:
            raise ValueError(f"strip triangles {f} and {g} are not adjacent")
        third = 3 - shared[0] - shared[1]
        # corners of g in CCW order starting after the third vertex
        ca, cb = (third + 1) % 3, (third + 2) % 3
        A = out[i - 1][list(fv).index(gv[ca])]
        B = out[i - 1][list(fv).index(gv[cb])]
        la = np.linalg.norm(verts[gv[third]] - verts[gv[ca]])
        lb = np.linalg.norm(verts[gv[third]] - verts[gv[cb]])
        ab = B - A
        lab = np.linalg.norm(ab)
        x = (la**2 - lb**2 + lab**2) / (2 * lab)
        y = np.sqrt(max(la**2 - x**2, 0.0))
        u = ab / lab
        w = np.array([-u[1], u[0]])
        # CCW order (ca, cb, third) puts the third vertex left of A->B
        C = A + x * u + y * w
        out[i][third], out[i][ca], out[i][cb] = C, A, B
    return out


def _to2d(corners2d: np.ndarray, bary: np.ndarray) -> np.ndarray:
    return bary @ corners2d


def _vec2d_to3d(mesh, f: int, corners2d: np.ndarray, vec2d: np.ndarray) -> np.ndarray:
    p = mesh.corners[f]
    m2 = np.column_stack([corners2d[1] - corners2d[0], corners2d[2] - corners2d[0]])
    coef = np.linalg.solve(m2, vec2d)
    return coef[0] * (p[1] - p[0]) + coef[1] * (p[2] - p[0])


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _funnel(start, end, portals):
    """Shortest path through a sequence of portals (left, right, left_id, right_id).

    Returns the list of path points and the list of (portal_index, vertex_id)
    corners where the path bends.
    """
    pts = [start]
    corners = []
    apex, apex_i = start, 0
    left, right = start, start
    left_i = right_i = 0
    left_id = right_id = None
    allp = [(start, start, None, None)] + portals + [(end, end, None, None)]
    i = 1
    while i < len(allp):
        pl, pr, lid, rid = allp[i]
        # tighten right side
        if _cross2(right - apex, pr - apex) >= 0.0:
            if np.array_equal(apex, right) or _cross2(left - apex, pr - apex) < 0.0:
                right, right_i, right_id = pr, i, rid
            else:
                pts.append(left)
                corners.append((left_i, left_id))
                apex, apex_i = left, left_i
                right, right_i, right_id = apex, apex_i, left_id
                i = apex_i + 1
                continue
        # tighten left side
        if _cross2(left - apex, pl - apex) <= 0.0:
            if np.array_equal(apex, left) or _cross2(right - apex, pl - apex) > 0.0:
                left, left_i, left_id = pl, i, lid
            else:
                pts.append(right)
                corners.append((right_i, right_id))
                apex, apex_i = right, right_i
                left, left_i, left_id = apex, apex_i, right_id
                i = apex_i + 1
                continue
        i += 1
    if not np.array_equal(pts[-1], end):
        pts.append(end)
    return pts, corners


def _portals(mesh, strip, unfolded):
    """Portal edges between consecutive strip triangles, oriented (left, right)."""
    tris = mesh.triangles
    portals = []
    for i in range(len(strip) - 1):
        fv, gv = tris[strip[i]], tris[strip[i + 1]]
        shared = [c for c in range(3) if fv[c] in gv]
        third = 3 - shared[0] - shared[1]
        # CCW triangle: walking out across edge (third+1 -> third+2), third+2 is on the left
        a, c = (third + 1) % 3, (third + 2) % 3
        portals.append((unfolded[i][c], unfolded[i][a], int(fv[c]), int(fv[a])))
    return portals


def _complement_arc(mesh, v: int, run: list[int]) -> list[int] | None:
    """Triangles around vertex v going the other way from run[0] to run[-1]."""
    tris = mesh.triangles
    nbr = mesh.topology.neighbor
    if len(run) < 2:
        return None

    def step(f, forward):
        k = int(np.flatnonzero(tris[f] == v)[0])
        return int(nbr[f, (k + 1) % 3] if forward else nbr[f, (k + 2) % 3])

    forward = step(run[0], True) == run[1]
    f = run[0]
    arc = [f]
    for _ in range(64):
        f = step(f, not forward)
        arc.append(f)
        if f == run[-1]:
            return arc
    return None


def _vertex_cone_angle(mesh, v: int) -> float:
    tris = mesh.topology.vertex_triangles[v]
    cots = mesh.cotangents[tris]
    mask = mesh.triangles[tris] == v
    return float(np.arctan2(1.0, cots[mask]).sum())


def _straighten(mesh, p: SurfacePoint, q: SurfacePoint, strip: list[int], max_rounds: int = 200):
    strip = _simplify_strip(strip)
    tried_endpoint: set[int] = set()
    tris = mesh.triangles
    p_at = {int(tris[p.triangle][k]) for k in range(3) if p.bary[k] > 1.0 - 1e-12}
    q_at = {int(tris[q.triangle][k]) for k in range(3) if q.bary[k] > 1.0 - 1e-12}
    for _ in range(max_rounds):
        unfolded = _unfold(mesh, strip)
        start = _to2d(unfolded[0], p.bary)
        end = _to2d(unfolded[-1], q.bary)
        pts, corners = _funnel(start, end, _portals(mesh, strip, unfolded))
        corners = [c for c in corners if c[1] is not None and c[1] not in p_at and c[1] not in q_at]
        edits = []
        taken_hi = len(strip)
        for portal_i, vid in sorted(corners, reverse=True):
            j0, j1 = portal_i - 1, portal_i
            if j1 >= taken_hi:
                continue
            while j0 > 0 and vid in tris[strip[j0 - 1]]:
                j0 -= 1
            while j1 < len(strip) - 1 and vid in tris[strip[j1 + 1]]:
                j1 += 1
            if j1 >= taken_hi:
                continue
            run = strip[j0 : j1 + 1]
            touches_end = j0 == 0 or j1 == len(strip) - 1
            if not touches_end:
                cone = _vertex_cone_angle(mesh, vid)
                wedge = float(sum(np.arctan2(1.0, mesh.cotangents[f][tris[f] == vid][0]) for f in run))
                if cone - wedge >= np.pi - 1e-12:
                    continue  # saddle-like side: the bend is geodesically legitimate
            if touches_end and vid in tried_endpoint:
                # an end point lies in the star of vid and both sides bend:
                # the path has to leave that star without circling vid
                star = {int(f) for f in mesh.topology.vertex_triangles[vid]}
                replacement = _dual_path(mesh, run[0], run[-1], blocked=star - {run[0], run[-1]})
            else:
                replacement = _complement_arc(mesh, vid, run)
                if touches_end:
                    tried_endpoint.add(vid)
            if replacement is None:
                continue
            edits.append((j0, j1, replacement))
            taken_hi = j0
        if not edits:
            return strip, unfolded, pts, corners
        for j0, j1, replacement in edits:  # descending j0
            strip = strip[:j0] + replacement + strip[j1 + 1 :]
        strip = _simplify_strip(strip)
    raise GeodesicFailure("geodesic straightening did not converge")


def _simplify_strip(strip: list[int]) -> list[int]:
    """Drop loops: a triangle visited twice is kept once, with the loop cut out."""
    out: list[int] = []
    pos: dict[int, int] = {}
    for f in strip:
        f = int(f)
        if f in pos:
            cut = pos[f]
            for g in out[cut + 1 :]:
                pos.pop(g, None)
            out = out[: cut + 1]
        else:
            pos[f] = len(out)
            out.append(f)
    return out


def _walk_trace(mesh, p: SurfacePoint, direction: np.ndarray, max_len: float, target: int):
    """Triangles crossed by a straight walk from p, stopping on entering ``target``."""
    grads = mesh.barycentric_gradients
    normals = mesh.triangle_normals
    nbr = mesh.topology.neighbor
    nbr_corner = mesh.topology.neighbor_corner
    verts, tris = mesh.vertices, mesh.triangles
    f, b, d = p.triangle, p.bary.copy(), np.asarray(direction, dtype=float)
    strip, walked = [f], 0.0
    while f != target and walked < max_len and len(strip) < 4 * mesh.n_triangles:
        beta = grads[f] @ d
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(beta < -1e-300, -b / beta, np.inf)
        s = np.maximum(s, 0.0)
        k = int(np.argmin(s))
        if not np.isfinite(s[k]):
            break
        nb = np.clip(b + s[k] * beta, 0.0, None)
        nb[k] = 0.0
        g, kg = int(nbr[f, k]), int(nbr_corner[f, k])
        newb = np.zeros(3)
        newb[(kg + 1) % 3] = nb[(k + 2) % 3]
        newb[(kg + 2) % 3] = nb[(k + 1) % 3]
        e = verts[tris[f, (k + 2) % 3]] - verts[tris[f, (k + 1) % 3]]
        e = e / math.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
        d = _hinge_one(d, e, normals[f], normals[g])
        walked += s[k]
        f, b = g, newb / max(newb.sum(), 1e-300)
        strip.append(f)
    return strip, f == target


def _cross3(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _hinge_one(v, e, n_from, n_to):
    """Single-vector version of hinge_rotate."""
    m_from, m_to = _cross3(n_from, e), _cross3(n_to, e)
    a = v[0] * e[0] + v[1] * e[1] + v[2] * e[2]
    b = v[0] * m_from[0] + v[1] * m_from[1] + v[2] * m_from[2]
    c = v[0] * n_from[0] + v[1] * n_from[1] + v[2] * n_from[2]
    return a * e + b * m_to + c * n_to


def _endpoint_vertices(mesh, p: SurfacePoint) -> set[int]:
    return {int(mesh.triangles[p.triangle][k]) for k in range(3) if p.bary[k] > 1.0 - 1e-12}


def _aim(mesh, p: SurfacePoint, q: SurfacePoint, direction: np.ndarray, max_iter: int = 40):
    """Shoot from p, unfold the crossed strip, re-aim at q's unfolded position.

    Returns (strip, unfolded, pts, corners) once the straight segment to q
    stays inside the strip, else None.
    """
    xq = q.position(mesh)
    max_len = 2.0 * np.linalg.norm(xq - p.position(mesh)) + 3.0 * mesh.mean_edge_length
    skip = _endpoint_vertices(mesh, p) | _endpoint_vertices(mesh, q)
    norm = np.linalg.norm(direction)
    if not norm > 0:
        return None
    d = direction / norm
    tried: list[np.ndarray] = []
    for _ in range(max_iter):
        strip, reached = _walk_trace(mesh, p, d, max_len, q.triangle)
        if not reached:
            centers = mesh.corners[strip].mean(axis=1)
            j = int(np.argmin(np.linalg.norm(centers - xq, axis=1)))
            tail = _dual_path(mesh, strip[j], q.triangle)
            if tail is None:
                return None
            strip = strip[:j] + tail
        strip = _simplify_strip(strip)
        unfolded = _unfold(mesh, strip)
        start, end = _to2d(unfolded[0], p.bary), _to2d(unfolded[-1], q.bary)
        pts, corners = _funnel(start, end, _portals(mesh, strip, unfolded))
        corners = [c for c in corners if c[1] is not None and c[1] not in skip]
        if not corners:
            return strip, unfolded, pts, corners
        seg = end - start
        nd = _vec2d_to3d(mesh, p.triangle, unfolded[0], seg / np.linalg.norm(seg))
        nd /= np.linalg.norm(nd)
        if any(np.linalg.norm(nd - t) < 1e-12 for t in tried):
            return None
        tried.append(nd)
        d = nd
    return None


def _initial_direction(mesh, p: SurfacePoint, q: SurfacePoint) -> np.ndarray:
    n = mesh.triangle_normals[p.triangle]
    v = q.position(mesh) - p.position(mesh)
    v = v - np.dot(v, n) * n
    if np.linalg.norm(v) < 1e-300:
        v = tangent_frame(mesh, [p.triangle])[0, 0]
    return v


def _strip_direction(mesh, p: SurfacePoint, q: SurfacePoint, strip: list[int]) -> np.ndarray:
    """Direction at p of the straight segment to q in the unfolded strip."""
    unfolded = _unfold(mesh, strip)
    seg = _to2d(unfolded[-1], q.bary) - _to2d(unfolded[0], p.bary)
    return _vec2d_to3d(mesh, p.triangle, unfolded[0], seg)


def _edge_twin(mesh, p: SurfacePoint) -> SurfacePoint | None:
    """The same point written in the neighbor triangle when p lies on exactly one edge."""
    zero = np.flatnonzero(p.bary <= 0.0)
    if len(zero) != 1:
        return None
    k = int(zero[0])
    g, kg = int(mesh.topology.neighbor[p.triangle, k]), int(mesh.topology.neighbor_corner[p.triangle, k])
    b = np.zeros(3)
    b[(kg + 1) % 3] = p.bary[(k + 2) % 3]
    b[(kg + 2) % 3] = p.bary[(k + 1) % 3]
    return SurfacePoint(g, b)


def _aim_twins(mesh, p: SurfacePoint, q: SurfacePoint):
    """Aim between edge twins of p and q, then re-attach the original end triangles."""
    pt, qt = _edge_twin(mesh, p), _edge_twin(mesh, q)
    for a, b in ((pt, q), (p, qt), (pt, qt)):
        if a is None or b is None:
            continue
        found = _aim(mesh, a, b, _initial_direction(mesh, a, b))
        if found is None or found[3]:
            continue
        strip = list(found[0])
        if strip[0] != p.triangle:
            strip.insert(0, p.triangle)
        if strip[-1] != q.triangle:
            strip.append(q.triangle)
        strip = _simplify_strip(strip)
        unfolded = _unfold(mesh, strip)
        pts = [_to2d(unfolded[0], p.bary), _to2d(unfolded[-1], q.bary)]
        return strip, unfolded, pts, []
    return None


def _solve_geodesic(mesh, p: SurfacePoint, q: SurfacePoint, direction=None, route=None) -> GeodesicPath:
    if direction is None:
        direction = _initial_direction(mesh, p, q)
    found = _aim(mesh, p, q, direction)
    if found is None:
        found = _aim_twins(mesh, p, q)
    if found is None:
        if route is None:
            route = _dual_path(mesh, p.triangle, q.triangle)
        found = _straighten(mesh, p, q, route)
    return _build_path(mesh, p, q, *found)


def _dual_path(mesh, source: int, target: int, blocked: set[int] | None = None) -> list[int] | None:
    base = mesh.__dict__.get("_dual_weighted")
    if base is None:
        base = mesh.topology.dual_graph.copy().astype(float)
        centers = mesh.corners.mean(axis=1)
        rows = np.repeat(np.arange(base.shape[0]), np.diff(base.indptr))
        base.data = np.linalg.norm(centers[rows] - centers[base.indices], axis=1)
        mesh.__dict__["_dual_weighted"] = base
    graph = base
    if blocked:
        graph = base.copy()
        rows = np.repeat(np.arange(graph.shape[0]), np.diff(graph.indptr))
        mask = np.isin(graph.indices, list(blocked)) | np.isin(rows, list(blocked))
        graph.data[mask] = 0.0
        graph.eliminate_zeros()
    _, pred = csgraph.dijkstra(graph, directed=True, indices=source, return_predecessors=True)
    if pred[target] < 0 and target != source:
        return None
    path = [target]
    while path[-1] != source:
        path.append(int(pred[path[-1]]))
    return path[::-1]


def _build_path(mesh, p, q, strip, unfolded, pts, corners) -> GeodesicPath:
    dedup = [pts[0]]
    for x in pts[1:]:
        if np.linalg.norm(x - dedup[-1]) > 1e-14:
            dedup.append(x)
    if len(dedup) == 1:
        dedup.append(pts[-1])
    pts = dedup
    start, end = pts[0], pts[-1]
    length = float(sum(np.linalg.norm(pts[i + 1] - pts[i]) for i in range(len(pts) - 1)))
    d0 = pts[1] - pts[0]
    d1 = pts[-1] - pts[-2]
    t0 = _vec2d_to3d(mesh, strip[0], unfolded[0], d0 / np.linalg.norm(d0))
    t1 = _vec2d_to3d(mesh, strip[-1], unfolded[-1], d1 / np.linalg.norm(d1))
    max_bend = 0.0
    for i in range(1, len(pts) - 1):
        a, b = pts[i] - pts[i - 1], pts[i + 1] - pts[i]
        max_bend = max(max_bend, abs(np.arctan2(_cross2(a, b), np.dot(a, b))))
    # crossing points of a straight path with each portal
    points = [p]
    if not corners:
        seg = end - start
        tris = mesh.triangles
        for i in range(len(strip) - 1):
            fv, gv = tris[strip[i]], tris[strip[i + 1]]
            shared = [c for c in range(3) if fv[c] in gv]
            a2, b2 = unfolded[i][shared[0]], unfolded[i][shared[1]]
            den = _cross2(seg, b2 - a2)
            s = _cross2(a2 - start, seg) / den if den != 0 else 0.5
            s = min(max(s, 0.0), 1.0)
            bary = np.zeros(3)
            bary[shared[0]], bary[shared[1]] = 1.0 - s, s
            points.append(SurfacePoint(strip[i], bary))
    points.append(q)
    return GeodesicPath(
        start=p, end=q, strip=list(strip), points=points, length=length,
        initial_tangent=t0, final_tangent=t1, max_bend=max_bend, corners=[c[1] for c in corners],
        midpoint=_ambient_at_fraction(mesh, strip, unfolded, pts, 0.5),
    )


def _ambient_at_fraction(mesh, strip, unfolded, pts, frac: float) -> np.ndarray:
    seg = [np.linalg.norm(pts[i + 1] - pts[i]) for i in range(len(pts) - 1)]
    target = frac * sum(seg)
    for i, L in enumerate(seg):
        if target <= L or i == len(seg) - 1:
            x = pts[i] + (pts[i + 1] - pts[i]) * (min(target, L) / L if L > 0 else 0.0)
            break
        target -= L
    best, best_err = None, np.inf
    for j, f in enumerate(strip):
        c = unfolded[j]
        m2 = np.column_stack([c[1] - c[0], c[2] - c[0]])
        s_, t_ = np.linalg.solve(m2, x - c[0])
        b = np.array([1.0 - s_ - t_, s_, t_])
        err = -min(b.min(), 0.0)
        if err < best_err:
            best, best_err = (f, b), err
            if err == 0.0:
                break
    f, b = best
    b = np.clip(b, 0.0, None)
    return (b / b.sum()) @ mesh.corners[f]


def _representations(mesh, p: SurfacePoint) -> list[SurfacePoint]:
    """p written in every triangle that contains it."""
    on = np.flatnonzero(p.bary > 0.0)
    if len(on) == 3:
        return [p]
    if len(on) == 2:
        twin = _edge_twin(mesh, p)
        return [p] if twin is None else [p, twin]
    v = int(mesh.triangles[p.triangle][on[0]])
    return [SurfacePoint.vertex_in(mesh, v, int(f)) for f in mesh.topology.vertex_triangles[v]]


def _fan_candidates(mesh, p: SurfacePoint, q: SurfacePoint, length: float, n_dirs: int = 180,
                    max_refine: int = 60) -> list:
    """Aimed geodesics seeded by the rays of a fan from p that pass close to q."""
    xq = q.position(mesh)
    h = 0.5 * mesh.mean_edge_length
    tris, barys, dirs = [], [], []
    for rep in _representations(mesh, p):
        fr = tangent_frame(mesh, [rep.triangle])[0]
        ang = 2.0 * np.pi * (np.arange(n_dirs) + 0.5) / n_dirs
        d = np.cos(ang)[:, None] * fr[0] + np.sin(ang)[:, None] * fr[1]
        beta = d @ mesh.barycentric_gradients[rep.triangle].T
        inward = np.all((rep.bary[None] > 0.0) | (beta > 1e-12), axis=1)
        tris += [rep.triangle] * int(inward.sum())
        barys += [rep.bary] * int(inward.sum())
        dirs.append(d[inward])
    if not tris:
        return []
    tri, bary, direction = np.array(tris), np.array(barys), np.concatenate(dirs)
    seeds = np.arange(len(tri))
    start_tri, start_bary, start_dir = tri.copy(), bary.copy(), direction.copy()
    best_d = np.full(len(tri), np.inf)
    walked = 0.0
    while walked < 1.05 * length:
        tri, bary, direction, _ = walk_batch(mesh, tri, bary, h * direction)
        walked += h
        best_d = np.minimum(best_d, np.linalg.norm(mesh.point_position(tri, bary) - xq, axis=1))
    near = seeds[best_d < 2.0 * mesh.mean_edge_length]
    out = []
    for i in near[np.argsort(best_d[near])][:max_refine]:
        a = SurfacePoint(int(start_tri[i]), start_bary[i])
        found = _aim(mesh, a, q, start_dir[i])
        if found is None or found[3]:
            continue
        # a vertex or edge start may leave through another triangle: the path
        # then starts at that representation of p
        out.append(_build_path(mesh, a, q, *found))
    return out


def minimal_geodesic(
    mesh: TriangulatedHypersurface,
    p: SurfacePoint,
    q: SurfacePoint,
    check_ambiguity: bool = True,
    rtol: float = AMBIGUITY_RTOL,
    max_rounds: int = 4,
) -> GeodesicPath:
    """Shortest geodesic from p to q.

    Shortest paths on a convex polyhedron never pass through a vertex, so
    the path is a straight walk.  It is found by shooting: walk from p,
    unfold the crossed strip and re-aim at q's unfolded image until the
    segment stays inside the strip.  If shooting stalls, a dual-graph route
    is straightened by flipping the strip around the vertices the taut path
    wraps.  With ``check_ambiguity`` a second candidate seeded by a route
    avoiding the first strip is solved too; a distinct candidate of (nearly) equal length raises
    :class:`AmbiguousGeodesic`, a shorter one replaces the first and the
    search repeats around it (at most ``max_rounds`` times).
    """
    same_spot = np.linalg.norm(p.position(mesh) - q.position(mesh)) <= 1e-14 * max(mesh.diameter, 1.0)
    if same_spot or (p.triangle == q.triangle and np.array_equal(p.bary, q.bary)):
        z = np.zeros(3)
        return GeodesicPath(p, q, [p.triangle], [p, q], 0.0, z, z)
    best = _solve_geodesic(mesh, p, q)
    if not check_ambiguity:
        return best
    for _ in range(max_rounds):
        if len(best.strip) < 2:
            return best
        interior = set(best.strip) - {p.triangle, q.triangle}
        alt_route = _dual_path(mesh, p.triangle, q.triangle, blocked=interior)
        if alt_route is None:
            return best
        alt = _solve_geodesic(mesh, p, q, _strip_direction(mesh, p, q, alt_route), alt_route)
        scale = max(best.length, alt.length)
        if np.linalg.norm(alt.midpoint - best.midpoint) <= 1e-7 * scale:
            return best if best.length <= alt.length else alt
        close = abs(alt.length - best.length) <= rtol * scale
        if close and (alt.corners or best.corners):
            # a path bending at a vertex of positive defect is not a geodesic
            return alt if best.corners and not alt.corners else best
        if close:
            raise AmbiguousGeodesic(
                f"two distinct geodesics of lengths {best.length:.12g} and {alt.length:.12g}"
            )
        if alt.length > best.length:
            break
        best = alt  # shorter route found: look again around it
    if best.length > FAN_SEARCH_FRACTION * math.pi / math.sqrt(max(float(mesh.gaussian_curvature.max()), 1e-300)):
        # long paths: near the cut locus ties can hide behind the route search
        for alt in _fan_candidates(mesh, p, q, best.length):
            scale = max(best.length, alt.length)
            if np.linalg.norm(alt.midpoint - best.midpoint) <= 1e-7 * scale:
                continue
            if abs(alt.length - best.length) <= rtol * scale:
                raise AmbiguousGeodesic(
                    f"two distinct geodesics of lengths {best.length:.12g} and {alt.length:.12g}"
                )
            if alt.length < best.length:
                best = alt
    return best


def geodesic_distance(mesh, p: SurfacePoint, q: SurfacePoint) -> float:
    return minimal_geodesic(mesh, p, q, check_ambiguity=False).length


def transport_along_strip(mesh: TriangulatedHypersurface, strip: list[int], vectors: np.ndarray) -> np.ndarray:
    """Hinge-rotate vectors (..., 3) from strip[0]'s plane to strip[-1]'s plane."""
    out = np.array(vectors, dtype=float)
    tris = mesh.triangles
    normals = mesh.triangle_normals
    verts = mesh.vertices
    flat = out.reshape(-1, 3)
    for f, g in zip(strip[:-1], strip[1:]):
        shared = [v for v in tris[f] if v in tris[g]]
        e = verts[shared[1]] - verts[shared[0]]
        e /= np.linalg.norm(e)
        m = len(flat)
        flat = hinge_rotate(flat, np.tile(e, (m, 1)), np.tile(normals[f], (m, 1)), np.tile(normals[g], (m, 1)))
    return flat.reshape(out.shape)


def parallel_transport(mesh: TriangulatedHypersurface, path: GeodesicPath, v: TangentVector) -> TangentVector:
    """Transport v from the start of ``path`` to its end across every crossed edge."""
    if v.base != path.start:
        raise BaseMismatch("vector is not based at the path start")
    w = transport_along_strip(mesh, path.strip, v.components)
    return TangentVector(path.end, w)


def reverse_path(path: GeodesicPath) -> GeodesicPath:
    return GeodesicPath(
        start=path.end, end=path.start, strip=path.strip[::-1], points=path.points[::-1],
        length=path.length, initial_tangent=-path.final_tangent, final_tangent=-path.initial_tangent,
        max_bend=path.max_bend, corners=path.corners[::-1],
    )
