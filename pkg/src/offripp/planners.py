"""Non-learning behavior policies: dataset generators and evaluation baselines.

All planners return a candidate index into the current neighbor list and only
ever pick unmasked candidates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import prm
from .episode import BeliefState, EnvConfig, measurement_points, reset
from .errors import ConfigurationError, ContractViolation

KINDS = ("greedy_entropy", "lookahead", "mixture", "random_walk", "rand_orienteering")


@dataclass(frozen=True)
class PlannerKind:
    name: str
    depth: int = 2
    eps: float = 0.4
    samples: int = 64
    time_cap: Optional[float] = None

    def __post_init__(self):
        if self.name not in KINDS:
            raise ConfigurationError(f"unknown planner {self.name!r}; choose from {KINDS}")
        if not 0.0 <= self.eps <= 1.0:
            raise ConfigurationError(f"eps={self.eps} outside [0, 1]")
        if self.depth < 1 or self.samples < 1:
            raise ConfigurationError("depth and samples must be >= 1")

    def params(self) -> dict:
        if self.name == "lookahead":
            return {"depth": self.depth}
        if self.name == "mixture":
            return {"eps": self.eps}
        if self.name == "rand_orienteering":
            return {"samples": self.samples, "time_cap": self.time_cap}
        return {}


def _unmasked(mask) -> np.ndarray:
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ContractViolation("no unmasked candidate")
    return idx


def greedy_entropy_step(state: BeliefState, mask=None) -> int:
    """Unmasked neighbor with the largest posterior variance (lowest index on ties)."""
    if mask is None:
        mask = state.mask()
    idx = _unmasked(mask)
    var = state.node_var[state.graph.adjacency[state.current][idx]]
    return int(idx[np.argmax(var)])


def mixture_step(state: BeliefState, eps: float, rng: np.random.Generator, mask=None) -> int:
    if mask is None:
        mask = state.mask()
    idx = _unmasked(mask)
    if rng.random() < eps:
        return int(idx[rng.integers(len(idx))])
    return greedy_entropy_step(state, mask)


def random_walk_step(state: BeliefState, rng: np.random.Generator, mask=None) -> int:
    if mask is None:
        mask = state.mask()
    idx = _unmasked(mask)
    return int(idx[rng.integers(len(idx))])


def _edge_points(state: BeliefState, cache: dict, a: int, b: int) -> np.ndarray:
    key = (a, b)
    if key not in cache:
        pos = state.graph.positions
        cache[key] = measurement_points(pos[a], pos[b], state.cfg.measure_spacing)
    return cache[key]


def enumerate_sequences(state: BeliefState, depth: int):
    """All budget-feasible node sequences of up to `depth` moves.

    A sequence stops early when it reaches the destination or the step cap.
    """
    g, geo = state.graph, state.geo
    out = []

    def rec(node, remaining, steps, prefix):
        if len(prefix) == depth or (prefix and (node == state.dest or steps >= state.cfg.max_steps)):
            out.append(tuple(prefix))
            return
        nbr = g.adjacency[node]
        mask = prm.budget_mask(g, geo, node, remaining)
        for c in np.flatnonzero(mask):
            rec(int(nbr[c]), remaining - g.edge_length[node][c], steps + 1, prefix + [int(nbr[c])])

    rec(state.current, state.remaining_budget, state.step_count, [])
    return sorted(out)


def sequence_points(state: BeliefState, seq, cache=None) -> np.ndarray:
    cache = {} if cache is None else cache
    nodes = (state.current,) + tuple(seq)
    return np.vstack([_edge_points(state, cache, a, b) for a, b in zip(nodes[:-1], nodes[1:])])


def _noise(state: BeliefState) -> float:
    return state.cfg.hyper.noise_var + state.probe.gp.jitter


def trace_reductions(state: BeliefState, point_sets) -> np.ndarray:
    """Grid-trace reduction from jointly observing each point set.

    Uses only locations: posterior variance does not depend on observed values.
    """
    probe = state.probe
    grid_idx = np.arange(state.cfg.grid_size)
    sizes = np.array([len(s) for s in point_sets])
    flat = np.vstack(point_sets)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    white = probe.whiten(flat)
    cz = probe.cross_cov(grid_idx, flat, white)  # (G, P)
    noise = _noise(state)
    h = state.cfg.hyper
    out = np.empty(len(point_sets))
    for s in np.unique(sizes):
        which = np.flatnonzero(sizes == s)
        cols = offsets[which][:, None] + np.arange(s)[None, :]  # (n, s)
        pts = flat[cols]  # (n, s, 2)
        d2 = np.sum((pts[:, :, None, :] - pts[:, None, :, :]) ** 2, axis=-1)
        kss = h.signal_var * np.exp(-0.5 * d2 / h.lengthscale**2)
        w = white[:, cols]  # (M, n, s)
        css = kss - np.einsum("mia,mib->iab", w, w) + noise * np.eye(s)
        czs = np.transpose(cz[:, cols], (1, 0, 2))  # (n, G, s)
        sol = np.linalg.solve(css, np.transpose(czs, (0, 2, 1)))  # (n, s, G)
        out[which] = np.einsum("iga,iag->i", czs, sol)
    return out


def lookahead_step(state: BeliefState, depth: int = 2) -> int:
    """First move of the feasible `depth`-move sequence with the largest trace reduction."""
    seqs = enumerate_sequences(state, depth)
    if not seqs:
        raise ContractViolation("no feasible sequence from current node")
    cache: dict = {}
    red = trace_reductions(state, [sequence_points(state, s, cache) for s in seqs])
    best = seqs[int(np.argmax(red))]  # seqs sorted, so argmax breaks ties lexicographically
    nbr = state.graph.adjacency[state.current]
    return int(np.searchsorted(nbr, best[0]))


@dataclass
class OrienteeringPlan:
    path: tuple[int, ...]
    final_trace: float  # simulated trace after following path
    n_sampled: int
    scores: list = field(default_factory=list)


def _shortest_successors(g: prm.PrmGraph, geo: prm.GeodesicTable):
    """Per node: candidate index of a shortest-path successor and hop count along it."""
    n = g.n_nodes
    succ = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if i == geo.dest:
            continue
        succ[i] = int(np.argmin(g.edge_length[i] + geo.dist[g.adjacency[i]]))
    order = np.argsort(geo.dist)
    hops = np.zeros(n, dtype=np.int64)
    for i in order:
        if i != geo.dest:
            hops[i] = hops[g.adjacency[i][succ[i]]] + 1
    return succ, hops


def random_feasible_walk(state: BeliefState, rng: np.random.Generator, succ=None, hops=None):
    """Uniform masked walk to the destination; switches to the shortest path when
    the step cap would otherwise be hit."""
    g, geo = state.graph, state.geo
    if succ is None:
        succ, hops = _shortest_successors(g, geo)
    node, remaining, steps = state.current, state.remaining_budget, state.step_count
    path = [node]
    while node != state.dest:
        if steps + hops[node] >= state.cfg.max_steps:
            c = int(succ[node])
        else:
            idx = _unmasked(prm.budget_mask(g, geo, node, remaining))
            c = int(idx[rng.integers(len(idx))])
        remaining -= g.edge_length[node][c]
        node = int(g.adjacency[node][c])
        steps += 1
        path.append(node)
    return tuple(path)


def simulated_final_trace(state: BeliefState, path) -> float:
    if len(path) < 2:
        return state.trace_now
    return state.trace_now - float(trace_reductions(state, [sequence_points(state, path[1:])])[0])


def rand_orienteering_from(state: BeliefState, samples: int, seed: int = 0,
                           time_cap: Optional[float] = None) -> OrienteeringPlan:
    """Randomized feasible-path sampler (a simplified stand-in for anytime orienteering).

    Walk i uses its own stream derived from (seed, i), so the sample set for a
    larger `samples` is a superset of the smaller one.
    """
    if samples < 1:
        raise ConfigurationError("samples must be >= 1")
    succ, hops = _shortest_successors(state.graph, state.geo)
    t0 = time.perf_counter()
    best, best_score, scores = None, np.inf, []
    for i in range(samples):
        rng = np.random.default_rng([seed, i])
        path = random_feasible_walk(state, rng, succ, hops)
        score = simulated_final_trace(state, path)
        scores.append(score)
        if score < best_score:
            best, best_score = path, score
        if time_cap is not None and time.perf_counter() - t0 > time_cap:
            break
    return OrienteeringPlan(best, best_score, len(scores), scores)


def rand_orienteering_plan(cfg: EnvConfig, field_seed: int, graph_seed: int, budget: float,
                           samples: int, time_cap: Optional[float] = None,
                           start=None, dest=None) -> OrienteeringPlan:
    state = reset(cfg, field_seed, graph_seed, budget, start, dest)
    return rand_orienteering_from(state, samples, seed=field_seed, time_cap=time_cap)


def path_policy(path):
    """Policy replaying a fixed node path."""
    it = iter(path[1:])

    def choose(state, feats, mask):
        nxt = next(it)
        return int(np.searchsorted(state.graph.adjacency[state.current], nxt))

    return choose


def make_policy(kind: PlannerKind, rng: np.random.Generator):
    """Per-episode policy callable for `episode.rollout`."""
    if kind.name == "greedy_entropy":
        return lambda s, f, m: greedy_entropy_step(s, m)
    if kind.name == "lookahead":
        return lambda s, f, m: lookahead_step(s, kind.depth)
    if kind.name == "mixture":
        return lambda s, f, m: mixture_step(s, kind.eps, rng, m)
    if kind.name == "random_walk":
        return lambda s, f, m: random_walk_step(s, rng, m)

    plan_holder = {}

    def orienteering(s, f, m):
        if "policy" not in plan_holder:
            seed = int(rng.integers(2**31))
            plan = rand_orienteering_from(s, kind.samples, seed, kind.time_cap)
            plan_holder["policy"] = path_policy(plan.path)
        return plan_holder["policy"](s, f, m)

    return orienteering
