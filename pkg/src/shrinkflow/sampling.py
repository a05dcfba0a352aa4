"""Per-path random streams, deterministic parallel map and empirical-law helpers."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .mesh import TriangulatedHypersurface, icosphere


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Independent stream keyed by (master seed, path index)."""
    return np.random.default_rng([int(seed), int(path_index)])


class NoiseSource:
    """Standard normal draws for a batch of paths, one stream per path.

    Drawing k steps at a time gives exactly the same numbers as drawing one at
    a time, so results do not depend on blocking or on how paths are split
    between workers.
    """

    def __init__(self, seed: int, path_ids, dim: int = 2):
        self.seed = int(seed)
        self.path_ids = np.asarray(path_ids, dtype=np.int64)
        self.dim = dim
        self._rngs = [path_rng(seed, i) for i in self.path_ids]

    def __len__(self) -> int:
        return len(self._rngs)

    def draw(self, steps: int) -> np.ndarray:
        """Array of shape (n_paths, steps, dim)."""
        if not self._rngs:
            return np.zeros((0, steps, self.dim))
        return np.stack([r.standard_normal((steps, self.dim)) for r in self._rngs])


def worker_count(requested: int | None = None) -> int:
    env = os.environ.get("SHRINKFLOW_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    if requested is None:
        return cap
    return max(1, min(int(requested), cap))


def parallel_map(func, items, workers: int | None = None) -> list:
    """Map preserving input order; a single worker runs inline."""
    items = list(items)
    n = worker_count(workers)
    if n <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(func, items))


def chunk_indices(n: int, chunks: int) -> list[np.ndarray]:
    chunks = max(1, min(chunks, n)) if n else 1
    return [c for c in np.array_split(np.arange(n), chunks)]


# ---------------------------------------------------------------------- empirical laws
def tv_distance(p, q) -> float:
    """Total variation between two probability vectors (half the L1 distance)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


class CellPartition:
    """Partition of a convex surface into cells seen from its centroid.

    Cells are the radial Voronoi regions of a coarse icosphere's vertices
    (12, 42, 162, ... cells). A point belongs to the cell whose direction is
    closest to the point's direction from the surface centroid.
    """

    def __init__(self, mesh: TriangulatedHypersurface, subdiv: int = 1):
        from scipy.spatial import cKDTree

        self.centers = icosphere(subdiv).vertices
        self._tree = cKDTree(self.centers)
        self.center_point = mesh.centroid
        vertex_cells = self.assign(mesh.vertices)
        self.uniform = np.bincount(vertex_cells, weights=mesh.vertex_areas, minlength=self.n_cells)
        self.uniform /= self.uniform.sum()

    @property
    def n_cells(self) -> int:
        return len(self.centers)

    def assign(self, points) -> np.ndarray:
        d = np.atleast_2d(points) - self.center_point
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self._tree.query(d)[1]

    def histogram(self, points, weights=None) -> np.ndarray:
        counts = np.bincount(self.assign(points), weights=weights, minlength=self.n_cells).astype(float)
        return counts / counts.sum()


def vertex_occupancy(mesh: TriangulatedHypersurface, triangles, bary) -> np.ndarray:
    """Fraction of points attached to each vertex (largest barycentric weight)."""
    tri = np.asarray(triangles)
    b = np.asarray(bary)
    v = mesh.triangles[tri, np.argmax(b, axis=1)]
    counts = np.bincount(v, minlength=mesh.n_vertices).astype(float)
    return counts / max(counts.sum(), 1.0)


def occupancy_density(mesh: TriangulatedHypersurface, triangles, bary) -> np.ndarray:
    """Vertex occupancy weighted by 1/a_v: a density estimate w.r.t. the surface measure."""
    return vertex_occupancy(mesh, triangles, bary) / mesh.vertex_areas
