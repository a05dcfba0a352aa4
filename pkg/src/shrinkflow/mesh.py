"""Triangulated closed surfaces in R^3 and their discrete differential geometry.

A :class:`TriangulatedHypersurface` is one time slice of the flow.  Vertex
positions are the embedding, the connectivity is shared by every slice of a
trajectory, and all derived quantities (normals, cotangent weights, lumped
areas, mean curvature) are computed lazily and cached.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import BadParams, Degenerate, NonManifold, ShrinkflowError

CONVEXITY_TOL = 1e-10


class Topology:
    """Connectivity tables of a closed oriented triangle mesh.

    ``neighbor[f, k]`` is the triangle across the edge of ``f`` opposite its
    local corner ``k``; ``neighbor_corner[f, k]`` is the corner of that
    neighbor opposite the same edge.
    """

    def __init__(self, triangles: np.ndarray, n_vertices: int):
        tri = np.asarray(triangles, dtype=np.int64)
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise NonManifold("triangles must be an (m, 3) index array")
        if tri.min() < 0 or tri.max() >= n_vertices:
            raise NonManifold("triangle index out of range")
        self.triangles = tri
        self.n_vertices = n_vertices
        nf = len(tri)

        # directed half-edge for corner k: tri[k+1] -> tri[k+2]
        src = tri[:, [1, 2, 0]].ravel()
        dst = tri[:, [2, 0, 1]].ravel()
        face = np.repeat(np.arange(nf), 3)
        corner = np.tile(np.arange(3), nf)

        key = src * n_vertices + dst
        if len(np.unique(key)) != len(key):
            raise NonManifold("repeated directed edge: inconsistent orientation or non-manifold edge")
        order = np.argsort(key)
        sorted_key = key[order]
        twin_key = dst * n_vertices + src
        pos = np.searchsorted(sorted_key, twin_key)
        pos = np.minimum(pos, len(key) - 1)
        found = sorted_key[pos] == twin_key
        if not found.all():
            raise NonManifold(f"{int((~found).sum())} half-edges have no twin (open or non-manifold surface)")
        twin = order[pos]

        self.neighbor = face[twin].reshape(nf, 3)
        self.neighbor_corner = corner[twin].reshape(nf, 3)

        und = np.sort(np.stack([src, dst], axis=1), axis=1)
        self.edges = np.unique(und, axis=0)
        # every undirected edge appears twice as a directed edge
        if 2 * len(self.edges) != 3 * nf:
            raise NonManifold("edge shared by a number of triangles other than two")

    @cached_property
    def dual_graph(self) -> sparse.csr_matrix:
        nf = len(self.triangles)
        rows = np.repeat(np.arange(nf), 3)
        cols = self.neighbor.ravel()
        return sparse.csr_matrix((np.ones_like(rows, dtype=float), (rows, cols)), shape=(nf, nf))

    @cached_property
    def vertex_triangles(self) -> list[np.ndarray]:
        nv = self.n_vertices
        flat = self.triangles.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=nv)
        splits = np.cumsum(counts)[:-1]
        return np.split(order // 3, splits)

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + len(self.triangles)


@dataclass(frozen=True)
class ConvexityReport:
    min_indicator: float
    n_nonconvex_edges: int
    strictly_convex: bool

    def to_dict(self) -> dict:
        return {
            "min_indicator": self.min_indicator,
            "n_nonconvex_edges": self.n_nonconvex_edges,
            "strictly_convex": self.strictly_convex,
        }


class TriangulatedHypersurface:
    """One immutable slice M_t: vertex positions plus shared connectivity."""

    def __init__(self, vertices, triangles, topology: Topology | None = None, check: bool = True):
        v = np.array(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise BadParams("vertices must be an (n, 3) array")
        if topology is None:
            topology = Topology(triangles, len(v))
        elif topology.n_vertices != len(v):
            raise BadParams("topology does not match vertex count")
        v.setflags(write=False)
        self.vertices = v
        self.topology = topology
        self.triangles = topology.triangles
        if check:
            self._check()

    def _check(self):
        if np.any(self.triangle_areas <= 0.0):
            raise Degenerate(f"{int(np.sum(self.triangle_areas <= 0))} zero-area triangles")
        if self.signed_volume <= 0.0:
            raise BadParams("triangles are not oriented outward (negative enclosed volume)")

    def with_vertices(self, vertices, check: bool = True) -> "TriangulatedHypersurface":
        """Same connectivity, new embedding."""
        return TriangulatedHypersurface(vertices, self.triangles, topology=self.topology, check=check)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    # ------------------------------------------------------------------ triangles
    @cached_property
    def corners(self) -> np.ndarray:
        """(m, 3, 3) array: corner positions of every triangle."""
        return self.vertices[self.triangles]

    @cached_property
    def _cross(self) -> np.ndarray:
        p = self.corners
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def triangle_normals(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self._cross / (2.0 * self.triangle_areas[:, None])

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """(m, 3, 3): gradient of each barycentric coordinate, in the triangle plane."""
        p = self.corners
        n = self.triangle_normals
        out = np.empty_like(p)
        for k in range(3):
            e = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]
            out[:, k] = np.cross(n, e) / (2.0 * self.triangle_areas[:, None])
        return out

    @cached_property
    def cotangents(self) -> np.ndarray:
        """(m, 3): cotangent of the interior angle at each corner."""
        p = self.corners
        cots = np.empty((self.n_triangles, 3))
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cots[:, k] = np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
        return cots

    @cached_property
    def signed_volume(self) -> float:
        p = self.corners
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)

    @property
    def area(self) -> float:
        return float(self.triangle_areas.sum())

    @property
    def centroid(self) -> np.ndarray:
        """Area-weighted centroid of the surface."""
        c = self.corners.mean(axis=1)
        return (c * self.triangle_areas[:, None]).sum(axis=0) / self.area

    @property
    def diameter(self) -> float:
        v = self.vertices
        if len(v) > 4000:
            # extreme points of the convex hull bound the diameter
            from scipy.spatial import ConvexHull

            v = v[ConvexHull(v).vertices]
        d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
        return float(np.sqrt(d2.max()))

    @cached_property
    def mean_edge_length(self) -> float:
        return float(self.edge_lengths().mean())

    # ------------------------------------------------------------------ vertices
    @cached_property
    def vertex_areas(self) -> np.ndarray:
        """Mixed-Voronoi lumped area per vertex; sums to the total area."""
        p = self.corners
        cots = self.cotangents
        areas = self.triangle_areas
        per_corner = np.zeros((self.n_triangles, 3))
        sq = np.empty((self.n_triangles, 3))
        for k in range(3):
            e = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]
            sq[:, k] = np.einsum("ij,ij->i", e, e)
        for k in range(3):
            # Voronoi share of corner k: edges k->k+1 (opposite k+2) and k->k+2 (opposite k+1)
            per_corner[:, k] = (sq[:, (k + 2) % 3] * cots[:, (k + 2) % 3] + sq[:, (k + 1) % 3] * cots[:, (k + 1) % 3]) / 8.0
        obtuse = cots < 0.0
        any_obtuse = obtuse.any(axis=1)
        if any_obtuse.any():
            fix = np.where(obtuse, areas[:, None] / 2.0, areas[:, None] / 4.0)
            per_corner[any_obtuse] = fix[any_obtuse]
        return np.bincount(self.triangles.ravel(), weights=per_corner.ravel(), minlength=self.n_vertices)

    @cached_property
    def stiffness(self) -> sparse.csr_matrix:
        """Cotangent stiffness matrix S (positive semidefinite, rows sum to 0).

        The discrete Laplace-Beltrami operator is ``-diag(1/a) @ S``.
        """
        tri = self.triangles
        w = 0.5 * self.cotangents
        i = np.concatenate([tri[:, 1], tri[:, 2], tri[:, 0]])
        j = np.concatenate([tri[:, 2], tri[:, 0], tri[:, 1]])
        wij = np.concatenate([w[:, 0], w[:, 1], w[:, 2]])
        nv = self.n_vertices
        off = sparse.coo_matrix((-wij, (i, j)), shape=(nv, nv))
        off = off + off.T
        diag = -np.asarray(off.sum(axis=1)).ravel()
        return (off + sparse.diags(diag)).tocsr()

    @cached_property
    def laplacian_of_position(self) -> np.ndarray:
        """Discrete Laplace-Beltrami of the coordinate functions, ΔF, per vertex."""
        return -(self.stiffness @ self.vertices) / self.vertex_areas[:, None]

    @cached_property
    def area_weighted_normals(self) -> np.ndarray:
        acc = np.zeros((self.n_vertices, 3))
        weighted = self._cross  # |cross| = 2*area
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], weighted)
        return acc / np.linalg.norm(acc, axis=1)[:, None]

    @cached_property
    def mean_curvature(self) -> np.ndarray:
        """Scalar mean curvature H = |ΔF| (positive on convex surfaces)."""
        return np.linalg.norm(self.laplacian_of_position, axis=1)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Outward unit normal ν = -ΔF/|ΔF|, falling back to area-weighted normals."""
        lap = self.laplacian_of_position
        h = np.linalg.norm(lap, axis=1)
        nu = self.area_weighted_normals.copy()
        ok = h > 1e-12
        nu[ok] = -lap[ok] / h[ok, None]
        return nu

    @cached_property
    def gaussian_curvature(self) -> np.ndarray:
        """Angle defect divided by lumped vertex area."""
        cots = self.cotangents
        angles = np.arctan2(1.0, cots)
        total = np.bincount(self.triangles.ravel(), weights=angles.ravel(), minlength=self.n_vertices)
        return (2.0 * np.pi - total) / self.vertex_areas

    # ------------------------------------------------------------------ edges
    def edge_lengths(self) -> np.ndarray:
        e = self.topology.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    # ------------------------------------------------------------------ points
    def point_position(self, triangle, bary) -> np.ndarray:
        """Ambient position of barycentric points (vectorized over leading axes)."""
        return np.einsum("...k,...kj->...j", np.asarray(bary, dtype=float), self.corners[np.asarray(triangle)])

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Closest (triangle, barycentric) for ambient points near the surface.

        Candidate triangles are those incident to the nearest vertex; points
        are projected onto each candidate plane and clamped to it.
        """
        from scipy.spatial import cKDTree

        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tree = cKDTree(self.vertices)
        _, nearest = tree.query(pts, k=3)
        vt = self.topology.vertex_triangles
        tri_out = np.empty(len(pts), dtype=np.int64)
        bary_out = np.empty((len(pts), 3))
        for i, x in enumerate(pts):
            cands = np.unique(np.concatenate([vt[v] for v in nearest[i]]))
            best = (np.inf, -1, None)
            for f in cands:
                b = _clamped_bary(self.corners[f], self.triangle_normals[f], x)
                d = np.linalg.norm(b @ self.corners[f] - x)
                if d < best[0]:
                    best = (d, f, b)
            tri_out[i] = best[1]
            bary_out[i] = best[2]
        return tri_out, bary_out

    # ------------------------------------------------------------------ transforms
    def scaled(self, factor: float, center=None) -> "TriangulatedHypersurface":
        c = np.zeros(3) if center is None else np.asarray(center, dtype=float)
        return self.with_vertices(c + factor * (self.vertices - c))

    def report(self) -> dict:
        h = self.mean_curvature
        lengths = self.edge_lengths()
        return {
            "n_vertices": self.n_vertices,
            "n_triangles": self.n_triangles,
            "area": self.area,
            "volume": self.signed_volume,
            "H_min": float(h.min()),
            "H_max": float(h.max()),
            "edge_ratio": float(lengths.max() / lengths.min()),
        }


def _clamped_bary(corners: np.ndarray, normal: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = x - np.dot(x - corners[0], normal) * normal
    e0, e1 = corners[1] - corners[0], corners[2] - corners[0]
    d = x - corners[0]
    g = np.array([[e0 @ e0, e0 @ e1], [e0 @ e1, e1 @ e1]])
    s, t = np.linalg.solve(g, [d @ e0, d @ e1])
    b = np.array([1.0 - s - t, s, t])
    if b.min() < 0.0:
        b = np.clip(b, 0.0, None)
        b /= b.sum()
    return b


# ---------------------------------------------------------------------- operations
def validate_convex_mesh(mesh: TriangulatedHypersurface, tol: float = CONVEXITY_TOL) -> ConvexityReport:
    """Edge-wise convexity check.

    For each interior edge the indicator is the (normalized) height of the
    opposite vertex of one triangle below the plane of the other; it is
    positive exactly when the hinge folds outward-convex.
    """
    topo = mesh.topology
    tri = mesh.triangles
    nbr, ncorner = topo.neighbor, topo.neighbor_corner
    f = np.repeat(np.arange(mesh.n_triangles), 3)
    k = np.tile(np.arange(3), mesh.n_triangles)
    g = nbr.ravel()
    opp_g = tri[g, ncorner.ravel()]
    a = tri[f, (k + 1) % 3]
    d = mesh.vertices[opp_g] - mesh.vertices[a]
    height = -np.einsum("ij,ij->i", mesh.triangle_normals[f], d) / np.linalg.norm(d, axis=1)
    m = float(height.min())
    bad = int(np.sum(height <= tol)) // 2
    return ConvexityReport(min_indicator=m, n_nonconvex_edges=bad, strictly_convex=bool(m > tol))


def in_convex_position(mesh: TriangulatedHypersurface) -> bool:
    """True when every vertex is a vertex of the convex hull and H > 0 everywhere.

    With fixed connectivity a convex vertex set can still carry folded hinges
    once the surface rounds off (the hull would flip those diagonals), so the
    flow checks convexity of the point set rather than of each hinge.
    """
    from scipy.spatial import ConvexHull

    hull = ConvexHull(mesh.vertices)
    return len(hull.vertices) == mesh.n_vertices and bool(mesh.mean_curvature.min() > 0)


def mean_curvature_data(mesh: TriangulatedHypersurface) -> dict[str, np.ndarray]:
    """Per-vertex outward normal, mean curvature and discrete ΔF."""
    if np.any(mesh.triangle_areas <= 0.0):
        raise Degenerate("cotangent weights undefined on zero-area triangle")
    return {"normal": mesh.vertex_normals, "H": mesh.mean_curvature, "laplacian": mesh.laplacian_of_position}


def edge_metric(mesh: TriangulatedHypersurface) -> np.ndarray:
    """Lengths of all edges, ordered as ``mesh.topology.edges``; the discrete metric."""
    return mesh.edge_lengths()


# ---------------------------------------------------------------------- builtin meshes
_PHI = (1.0 + 5.0**0.5) / 2.0
_ICO_V = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=float,
)
_ICO_F = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def _icosphere_arrays(subdiv: int) -> tuple[np.ndarray, np.ndarray]:
    verts = list(_ICO_V / np.linalg.norm(_ICO_V, axis=1)[:, None])
    faces = _ICO_F
    for _ in range(subdiv):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = midpoint.get(key)
            if idx is None:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                idx = midpoint[key] = len(verts) - 1
            return idx

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = np.array(new, dtype=np.int64)
    return np.array(verts), faces


def icosphere(subdiv: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangulatedHypersurface:
    """Subdivided icosahedron projected to a sphere; 10*4**subdiv + 2 vertices."""
    if not (0 <= int(subdiv) <= 7) or int(subdiv) != subdiv:
        raise BadParams(f"subdiv must be an integer in [0, 7], got {subdiv}")
    if not radius > 0:
        raise BadParams("radius must be positive")
    v, f = _icosphere_arrays(int(subdiv))
    return TriangulatedHypersurface(np.asarray(center, dtype=float) + radius * v, f)


def ellipsoid(a: float, b: float, c: float, subdiv: int = 3) -> TriangulatedHypersurface:
    """Icosphere stretched to semi-axes (a, b, c)."""
    if min(a, b, c) <= 0:
        raise BadParams("semi-axes must be positive")
    sphere = icosphere(subdiv)
    return sphere.with_vertices(sphere.vertices * np.array([a, b, c], dtype=float))


def builtin_mesh(kind: str, **params) -> TriangulatedHypersurface:
    """Analytic reference surfaces: ``icosphere(subdiv, R)`` or ``ellipsoid(a, b, c, subdiv)``."""
    if kind == "icosphere":
        return icosphere(params.get("subdiv", 3), params.get("R", params.get("radius", 1.0)))
    if kind == "ellipsoid":
        return ellipsoid(params.get("a", 1.0), params.get("b", 1.0), params.get("c", 1.5), params.get("subdiv", 3))
    raise BadParams(f"unknown builtin mesh {kind!r}")


def parse_mesh_spec(spec: str) -> TriangulatedHypersurface:
    """Build a mesh from ``icosphere:4`` / ``icosphere:4:0.5`` / ``ellipsoid:1,1,1.5:3`` or a file path."""
    if spec.startswith("icosphere"):
        parts = spec.split(":")
        subdiv = int(parts[1]) if len(parts) > 1 else 3
        radius = float(parts[2]) if len(parts) > 2 else 1.0
        return icosphere(subdiv, radius)
    if spec.startswith("ellipsoid"):
        parts = spec.split(":")
        axes = [float(x) for x in parts[1].split(",")] if len(parts) > 1 else [1.0, 1.0, 1.5]
        subdiv = int(parts[2]) if len(parts) > 2 else 3
        return ellipsoid(*axes, subdiv=subdiv)
    return read_mesh(spec)


# ---------------------------------------------------------------------- I/O
def read_off(path) -> TriangulatedHypersurface:
    tokens = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ShrinkflowError(f"{path}: not an ASCII OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    v = np.array(tokens[pos : pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        if k != 3:
            raise ShrinkflowError(f"{path}: only triangles are supported (found {k}-gon)")
        faces.append([int(x) for x in tokens[pos + 1 : pos + 4]])
        pos += 1 + k
    return TriangulatedHypersurface(v, np.array(faces, dtype=np.int64))


def read_obj(path) -> TriangulatedHypersurface:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise ShrinkflowError(f"{path}: only triangles are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriangulatedHypersurface(np.array(verts), np.array(faces, dtype=np.int64))


def read_mesh(path) -> TriangulatedHypersurface:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    return read_off(path)


def write_off(mesh: TriangulatedHypersurface, path) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
