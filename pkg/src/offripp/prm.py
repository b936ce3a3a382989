"""Probabilistic roadmap over the unit square and budget-feasibility queries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from .errors import ContractViolation

MAX_ATTEMPTS = 100
# slack for accumulated floating-point error in budget bookkeeping
BUDGET_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class PrmGraph:
    positions: np.ndarray  # (N, 2)
    adjacency: tuple[np.ndarray, ...]  # sorted neighbor indices per node
    edge_length: tuple[np.ndarray, ...]  # aligned with adjacency
    seed: int = 0
    _csr: csr_matrix = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def neighbors(self, i: int) -> np.ndarray:
        return self.adjacency[i]

    def length(self, i: int, j: int) -> float:
        nbr = self.adjacency[i]
        k = int(np.searchsorted(nbr, j))
        if k >= len(nbr) or nbr[k] != j:
            raise KeyError(f"no edge {i}-{j}")
        return float(self.edge_length[i][k])

    def to_dict(self) -> dict:
        return {
            "positions": self.positions.tolist(),
            "adjacency": [a.tolist() for a in self.adjacency],
        }

    @classmethod
    def from_dict(cls, d: dict, seed: int = 0) -> "PrmGraph":
        return graph_from_adjacency(np.array(d["positions"], dtype=float),
                                    [np.array(a, dtype=np.int64) for a in d["adjacency"]], seed)


@dataclass(frozen=True, eq=False)
class GeodesicTable:
    dest: int
    dist: np.ndarray


def graph_from_adjacency(positions: np.ndarray, adjacency, seed: int = 0) -> PrmGraph:
    """Build a graph from positions and (symmetric) neighbor lists."""
    positions = np.asarray(positions, dtype=float)
    adj = tuple(np.array(sorted(set(int(j) for j in a)), dtype=np.int64) for a in adjacency)
    lengths = tuple(np.linalg.norm(positions[a] - positions[i], axis=1) for i, a in enumerate(adj))
    for a in adj:
        a.setflags(write=False)
    rows = np.concatenate([np.full(len(a), i) for i, a in enumerate(adj)]) if adj else np.zeros(0)
    cols = np.concatenate(adj) if adj else np.zeros(0)
    data = np.concatenate(lengths) if adj else np.zeros(0)
    n = len(positions)
    csr = csr_matrix((data, (rows.astype(np.int64), cols.astype(np.int64))), shape=(n, n))
    return PrmGraph(positions, adj, lengths, seed, csr)


def _knn_graph(positions: np.ndarray, k: int) -> list[np.ndarray]:
    n = len(positions)
    d2 = np.sum((positions[:, None, :] - positions[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    # stable sort: equal distances resolve to the lower node index
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    nbrs = [set() for _ in range(n)]
    for i in range(n):
        for j in order[i]:
            nbrs[i].add(int(j))
            nbrs[int(j)].add(i)
    return [np.array(sorted(s), dtype=np.int64) for s in nbrs]


def build_prm(seed: int, n_nodes: int = 400, k: int = 20) -> PrmGraph:
    if n_nodes < k + 1:
        raise ValueError(f"n_nodes={n_nodes} must be at least k+1={k + 1}")
    for attempt in range(MAX_ATTEMPTS):
        s = seed + attempt
        rng = np.random.default_rng(s)
        positions = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
        g = graph_from_adjacency(positions, _knn_graph(positions, k), s)
        n_comp, _ = connected_components(g._csr, directed=False)
        if n_comp == 1:
            return g
    raise RuntimeError(f"no connected roadmap after {MAX_ATTEMPTS} attempts from seed {seed}")


def shortest_dists(g: PrmGraph, dest: int) -> GeodesicTable:
    if not 0 <= dest < g.n_nodes:
        raise IndexError(f"destination {dest} out of range")
    dist = dijkstra(g._csr, directed=False, indices=dest)
    dist.setflags(write=False)
    return GeodesicTable(int(dest), dist)


def budget_mask(g: PrmGraph, geo: GeodesicTable, current: int, remaining_budget: float) -> np.ndarray:
    """Neighbors of `current` from which the destination stays reachable."""
    if remaining_budget < geo.dist[current] - BUDGET_EPS:
        raise ContractViolation(
            f"remaining budget {remaining_budget} below geodesic {geo.dist[current]} at node {current}"
        )
    nbr = g.adjacency[current]
    return g.edge_length[current] + geo.dist[nbr] <= remaining_budget + BUDGET_EPS
