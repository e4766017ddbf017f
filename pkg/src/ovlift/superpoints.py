"""Normal estimation, adjacency graphs and graph-based over-segmentation into superpoints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .unionfind import UnionFind


@dataclass(frozen=True)
class Superpoint:
    id: int
    point_indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.point_indices)


@dataclass
class WeightedGraph:
    num_nodes: int
    edges: np.ndarray  # E×2 int, i < j, unique
    weights: np.ndarray  # E float in [0, 1]


def knn_indices(points, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points for every point (N×k)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    k_eff = min(k, n - 1)
    if k_eff < 1:
        return np.zeros((n, 0), dtype=np.int64)
    _, idx = cKDTree(points).query(points, k=k_eff + 1)
    idx = np.asarray(idx, dtype=np.int64).reshape(n, k_eff + 1)
    # Duplicate points can push self out of column 0; drop self wherever it is.
    is_self = idx == np.arange(n)[:, None]
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k_eff)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(n), drop] = False
    return idx[keep].reshape(n, k_eff)


def estimate_normals(points, k_nn: int = 10, neighbors=None):
    """PCA normals over the ``k_nn`` nearest neighbours (self included).

    Returns ``(normals, degenerate)``; degenerate neighbourhoods (covariance rank
    below 2) get the fallback normal (0, 0, 1). Each normal is flipped so its
    largest-magnitude component is positive.
    """
    points = np.asarray(points, dtype=np.float64)
    if k_nn < 3:
        raise ValueError("k_nn must be >= 3")
    if len(points) < k_nn:
        raise ValueError(f"need at least k_nn={k_nn} points, got {len(points)}")
    if neighbors is None:
        neighbors = knn_indices(points, k_nn - 1)
    hood = np.concatenate([np.arange(len(points))[:, None], neighbors[:, : k_nn - 1]], axis=1)
    nb = points[hood]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]

    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-10 * scale + 1e-24
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    mag = np.abs(normals)
    # Near-equal magnitudes count as a tie, resolved toward the first axis.
    lead = np.argmax(mag >= mag.max(axis=1, keepdims=True) - 1e-9, axis=1)
    sign = np.sign(normals[np.arange(len(normals)), lead])
    normals *= np.where(sign < 0, -1.0, 1.0)[:, None]
    return normals, degenerate


def build_graph(points, k_nn: int = 10, mesh_edges=None, normals=None) -> WeightedGraph:
    """Adjacency graph weighted by normal dissimilarity ``1 - |n_i . n_j|``.

    Mesh edges are used when given, otherwise the symmetrised k-NN graph.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    neighbors = None
    if mesh_edges is not None and len(mesh_edges):
        pairs = np.asarray(mesh_edges, dtype=np.int64).reshape(-1, 2)
    else:
        neighbors = knn_indices(points, k_nn)
        pairs = np.stack([np.repeat(np.arange(n), neighbors.shape[1]), neighbors.reshape(-1)], axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)

    if normals is None:
        k_normals = max(3, k_nn)
        if n >= k_normals:
            if neighbors is not None and neighbors.shape[1] >= k_normals - 1:
                normals, _ = estimate_normals(points, k_normals, neighbors)
            else:
                normals, _ = estimate_normals(points, k_normals)
        else:
            normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    dots = np.abs(np.einsum("ij,ij->i", normals[pairs[:, 0]], normals[pairs[:, 1]]))
    weights = np.clip(1.0 - dots, 0.0, 1.0)
    return WeightedGraph(n, pairs, weights)


def segment_superpoints(graph: WeightedGraph, k_fh: float = 0.05, min_size: int = 50) -> list:
    """Felzenszwalb-Huttenlocher segmentation of ``graph``.

    Components smaller than ``min_size`` are merged into their lowest-weight
    neighbour in a second pass; ones without any neighbour are dropped
    (background). Output is sorted by descending size, ties by lowest point index,
    and ids follow that order.
    """
    if k_fh <= 0:
        raise ValueError("k_fh must be positive")
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    n = graph.num_nodes
    edges, weights = graph.edges, graph.weights
    order = np.lexsort((edges[:, 1], edges[:, 0], weights))
    ei = edges[order, 0].tolist()
    ej = edges[order, 1].tolist()
    ew = weights[order].tolist()

    uf = UnionFind(n)
    parent, size = uf.parent, uf.size
    internal = [0.0] * n
    find = uf.find
    for a, b, w in zip(ei, ej, ew):
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if w <= internal[ra] + k_fh / size[ra] and w <= internal[rb] + k_fh / size[rb]:
            r = uf.union(ra, rb)
            internal[r] = w

    for a, b in zip(ei, ej):
        ra, rb = find(a), find(b)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            uf.union(ra, rb)

    roots = np.array([find(i) for i in range(n)], dtype=np.int64)
    _, first, inverse, counts = np.unique(roots, return_index=True, return_inverse=True, return_counts=True)
    groups = np.argsort(inverse, kind="stable")
    splits = np.split(groups, np.cumsum(counts)[:-1])
    comps = [(int(counts[c]), int(first[c]), splits[c]) for c in range(len(counts)) if counts[c] >= min_size]
    comps.sort(key=lambda c: (-c[0], c[1]))
    return [Superpoint(i, idx) for i, (_, _, idx) in enumerate(comps)]


def select_prompts(superpoints, n: int) -> list:
    """The ``n`` largest superpoints (ties to lower id), largest first."""
    if n < 1:
        raise ValueError("number of prompts must be >= 1")
    ranked = sorted(superpoints, key=lambda s: (-s.size, s.id))
    return ranked[:n]


def superpoint_labels(superpoints, num_points: int) -> np.ndarray:
    """Per-point superpoint id, −1 for background."""
    labels = np.full(num_points, -1, dtype=np.int64)
    for sp in superpoints:
        labels[sp.point_indices] = sp.id
    return labels
