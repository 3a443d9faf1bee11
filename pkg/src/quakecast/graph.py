"""Epsilon nearest-neighbour graph over active bins, made connected by merge edges."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .gridding import SpatialGrid

EPSILON_TAG = "epsilon"
MERGE_TAG = "merge"
# rounding applied to distances before ordering, so grid ties compare equal
_DIST_DECIMALS = 12


@dataclass
class BinGraph:
    """Undirected graph whose nodes are bins.

    ``edges`` holds node-position pairs ``(i, j)`` with ``i < j``; ``edge_origin``
    tags each edge as epsilon or merge.
    """

    bins: np.ndarray
    centers: np.ndarray
    edges: list[tuple[int, int]] = field(default_factory=list)
    edge_origin: list[str] = field(default_factory=list)
    rows_cols: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.bins)

    def edge_set(self, tag: str | None = None) -> set[tuple[int, int]]:
        """Edges in bin-index space, so graphs built from reordered nodes compare equal."""
        out = set()
        for (i, j), t in zip(self.edges, self.edge_origin):
            if tag is None or t == tag:
                a, b = int(self.bins[i]), int(self.bins[j])
                out.add((min(a, b), max(a, b)))
        return out

    def neighbors(self) -> list[list[int]]:
        nbrs = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [sorted(n) for n in nbrs]

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = True
        return adj

    def without_merges(self) -> BinGraph:
        kept = [(e, t) for e, t in zip(self.edges, self.edge_origin) if t == EPSILON_TAG]
        return BinGraph(
            self.bins, self.centers, [e for e, _ in kept], [t for _, t in kept], self.rows_cols
        )


def graph_nodes(grid: SpatialGrid, bins: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    bins = np.asarray(bins, dtype=np.int64)
    return bins, grid.centers(bins)


def epsilon_nng(bins: Sequence[int], centers: np.ndarray, epsilon: float = 0.15) -> BinGraph:
    """Link every pair of nodes whose centers lie within ``epsilon`` degrees."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    bins = np.asarray(bins, dtype=np.int64)
    centers = np.asarray(centers, dtype=float)
    pairs = cKDTree(centers).query_pairs(r=epsilon, output_type="ndarray") if len(bins) else np.zeros((0, 2), int)
    # the tree uses <= r in its own arithmetic; recheck so the edge rule is exactly dist <= epsilon
    if len(pairs):
        d = np.hypot(*(centers[pairs[:, 0]] - centers[pairs[:, 1]]).T)
        pairs = pairs[d <= epsilon]
    pairs = np.sort(pairs, axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0])) if len(pairs) else []
    edges = [(int(i), int(j)) for i, j in pairs[order]]
    return BinGraph(bins, centers, edges, [EPSILON_TAG] * len(edges))


def component_labels(n_nodes: int, edges: Sequence[tuple[int, int]]) -> tuple[int, np.ndarray]:
    if n_nodes == 0:
        return 0, np.zeros(0, dtype=np.int64)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    m = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n_nodes, n_nodes))
    n, labels = connected_components(m, directed=False)
    return int(n), labels


def connect_components(graph: BinGraph) -> BinGraph:
    """Join components by repeatedly adding the globally closest inter-component pair.

    Equivalent to Kruskal's algorithm over all node pairs seeded with the
    existing components. Ties go to the smaller ``(min bin, max bin)`` pair.
    """
    n_comp, labels = component_labels(graph.n_nodes, graph.edges)
    if n_comp <= 1:
        return BinGraph(graph.bins, graph.centers, list(graph.edges), list(graph.edge_origin), graph.rows_cols)

    i, j = np.triu_indices(graph.n_nodes, k=1)
    cross = labels[i] != labels[j]
    i, j = i[cross], j[cross]
    d = np.round(np.hypot(*(graph.centers[i] - graph.centers[j]).T), _DIST_DECIMALS)
    bi, bj = graph.bins[i], graph.bins[j]
    order = np.lexsort((np.maximum(bi, bj), np.minimum(bi, bj), d))

    parent = list(range(n_comp))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = list(graph.edges)
    origin = list(graph.edge_origin)
    remaining = n_comp - 1
    for k in order:
        a, b = find(labels[i[k]]), find(labels[j[k]])
        if a == b:
            continue
        parent[max(a, b)] = min(a, b)
        edges.append((int(i[k]), int(j[k])))
        origin.append(MERGE_TAG)
        remaining -= 1
        if remaining == 0:
            break
    return BinGraph(graph.bins, graph.centers, edges, origin, graph.rows_cols)


def build_bin_graph(grid: SpatialGrid, bins: Sequence[int], epsilon: float = 0.15) -> BinGraph:
    b, centers = graph_nodes(grid, bins)
    g = connect_components(epsilon_nng(b, centers, epsilon))
    g.rows_cols = np.column_stack(np.divmod(b, grid.n_cols)) if len(b) else np.zeros((0, 2), int)
    return g


def degree_stats(graph: BinGraph) -> tuple[np.ndarray, int]:
    deg = np.zeros(graph.n_nodes, dtype=np.int64)
    for i, j in graph.edges:
        deg[i] += 1
        deg[j] += 1
    n_comp, _ = component_labels(graph.n_nodes, graph.edges)
    return deg, n_comp


def save_graph(graph: BinGraph, directory: str | Path) -> None:
    """Write ``nodes.txt`` (index row col lat lon) and ``edges.txt`` (i j tag), bin indices throughout."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rc = graph.rows_cols if graph.rows_cols is not None else np.full((graph.n_nodes, 2), -1)
    with open(d / "nodes.txt", "w", encoding="utf-8", newline="\n") as fh:
        for b, (r, c), (lat, lon) in zip(graph.bins, rc, graph.centers):
            fh.write(f"{int(b)} {int(r)} {int(c)} {float(lat)!r} {float(lon)!r}\n")
    with open(d / "edges.txt", "w", encoding="utf-8", newline="\n") as fh:
        for (i, j), tag in zip(graph.edges, graph.edge_origin):
            fh.write(f"{int(graph.bins[i])} {int(graph.bins[j])} {tag}\n")


def load_graph(directory: str | Path) -> BinGraph:
    d = Path(directory)
    bins, rc, centers = [], [], []
    for line in (d / "nodes.txt").read_text(encoding="utf-8").splitlines():
        if line.strip():
            b, r, c, lat, lon = line.split()
            bins.append(int(b))
            rc.append((int(r), int(c)))
            centers.append((float(lat), float(lon)))
    pos = {b: k for k, b in enumerate(bins)}
    edges, origin = [], []
    for line in (d / "edges.txt").read_text(encoding="utf-8").splitlines():
        if line.strip():
            a, b, tag = line.split()
            i, j = pos[int(a)], pos[int(b)]
            edges.append((min(i, j), max(i, j)))
            origin.append(tag)
    return BinGraph(
        np.asarray(bins, dtype=np.int64),
        np.asarray(centers, dtype=float).reshape(-1, 2),
        edges,
        origin,
        np.asarray(rc, dtype=np.int64).reshape(-1, 2),
    )
