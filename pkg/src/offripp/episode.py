"""IPP environment loop: belief state, masking, measurements, rewards."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Optional

import numpy as np

from . import prm
from .errors import ConfigurationError, ContractViolation
from .field import IntensityField, make_field, sample_field
from .gp import GpHyper, ProbeSet, empty_gp, unit_grid
from .transitions import N_FEATURES, Transition

MAX_RESETS = 1000


@dataclass(frozen=True)
class EnvConfig:
    n_nodes: int = 400
    k: int = 20
    measure_spacing: float = 0.2
    budget_range: tuple[float, float] = (6.0, 8.0)
    eval_budgets: tuple[float, ...] = (6.0, 8.0, 10.0)
    max_steps: int = 256
    alpha: float = 0.1
    trace_grid: int = 30
    hyper: GpHyper = GpHyper()

    def __post_init__(self):
        if min(self.n_nodes, self.k, self.measure_spacing, self.max_steps, self.trace_grid) <= 0:
            raise ConfigurationError(f"non-positive environment parameter in {self}")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")

    @property
    def grid_size(self) -> int:
        return self.trace_grid**2

    @property
    def prior_trace(self) -> float:
        return self.grid_size * self.hyper.signal_var


@dataclass(frozen=True, eq=False)
class BeliefState:
    cfg: EnvConfig
    field: IntensityField
    graph: prm.PrmGraph
    geo: prm.GeodesicTable
    probe: ProbeSet  # probes = trace grid followed by graph nodes
    current: int
    dest: int
    budget: float
    remaining_budget: float
    trace_now: float
    step_count: int = 0
    history: tuple[int, ...] = ()
    done: bool = False

    @property
    def node_mean(self) -> np.ndarray:
        return self.probe.mean[self.cfg.grid_size:]

    @property
    def node_var(self) -> np.ndarray:
        return self.probe.var[self.cfg.grid_size:]

    @property
    def grid_var(self) -> np.ndarray:
        return self.probe.var[: self.cfg.grid_size]

    @property
    def traveled(self) -> float:
        return self.budget - self.remaining_budget

    def mask(self) -> np.ndarray:
        return prm.budget_mask(self.graph, self.geo, self.current, self.remaining_budget)


def measurement_points(a, b, spacing: float = 0.2) -> np.ndarray:
    """Points every `spacing` of arc length from `a` towards `b`, plus `b` itself."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.linalg.norm(b - a))
    n_inner = max(math.ceil(length / spacing - 1e-12) - 1, 0)
    s = spacing * np.arange(1, n_inner + 1)
    pts = a + np.outer(s / length, b - a) if n_inner else np.zeros((0, 2))
    return np.clip(np.vstack([pts, b[None, :]]), 0.0, 1.0)


def _observe(probe: ProbeSet, fld: IntensityField, pts: np.ndarray) -> ProbeSet:
    for p in pts:
        probe = probe.add(p, sample_field(fld, p))
    return probe


def reset(cfg: EnvConfig, field_seed: int, graph_seed: int, budget: float,
          start: Optional[int] = None, dest: Optional[int] = None) -> BeliefState:
    fld = make_field(field_seed)
    graph = prm.build_prm(graph_seed, cfg.n_nodes, cfg.k)
    return reset_on(cfg, fld, graph, budget, start, dest, rng_seed=(field_seed, graph_seed))


def reset_on(cfg: EnvConfig, fld: IntensityField, graph: prm.PrmGraph, budget: float,
             start: Optional[int] = None, dest: Optional[int] = None, rng_seed=0) -> BeliefState:
    """Start an episode on an existing field/graph; random endpoints come from `rng_seed`."""
    rng = np.random.default_rng(rng_seed)
    n = graph.n_nodes
    for _ in range(MAX_RESETS):
        s = int(rng.integers(n)) if start is None else int(start)
        d = int(rng.integers(n)) if dest is None else int(dest)
        if s == d:
            if start is not None and dest is not None:
                raise ConfigurationError("start and destination coincide")
            continue
        geo = prm.shortest_dists(graph, d)
        if budget >= geo.dist[s]:
            break
        if start is not None and dest is not None:
            raise ConfigurationError(f"budget {budget} below geodesic {geo.dist[s]:.4f}")
    else:
        raise ConfigurationError(f"no feasible start/destination for budget {budget}")
    probes = np.vstack([unit_grid(cfg.trace_grid), graph.positions])
    probe = ProbeSet.from_gp(empty_gp(cfg.hyper), probes)
    probe = _observe(probe, fld, graph.positions[s][None, :])
    return BeliefState(
        cfg, fld, graph, geo, probe, s, d, float(budget), float(budget),
        float(np.sum(probe.var[: cfg.grid_size])), 0, (s,),
    )


def step(state: BeliefState, action: int):
    """Move to candidate `action` (index into the current neighbor list).

    Returns (next_state, reward, done).
    """
    if state.done:
        raise ContractViolation("step called on a finished episode")
    nbr = state.graph.adjacency[state.current]
    mask = state.mask()
    if not 0 <= action < len(nbr) or not mask[action]:
        raise ContractViolation(f"action {action} is masked or out of range at node {state.current}")
    nxt = int(nbr[action])
    length = float(state.graph.edge_length[state.current][action])
    pts = measurement_points(state.graph.positions[state.current], state.graph.positions[nxt],
                             state.cfg.measure_spacing)
    probe = _observe(state.probe, state.field, pts)
    trace = float(np.sum(probe.var[: state.cfg.grid_size]))
    reward = (state.trace_now - trace) / state.trace_now
    steps = state.step_count + 1
    done = nxt == state.dest or steps >= state.cfg.max_steps
    if done:
        reward -= state.cfg.alpha * trace
    new = replace(
        state, probe=probe, current=nxt, remaining_budget=state.remaining_budget - length,
        trace_now=trace, step_count=steps, history=state.history + (nxt,), done=done,
    )
    return new, reward, done


def candidate_features(state: BeliefState):
    """(C, 10) feature matrix over the current neighbors and the budget mask."""
    g = state.graph
    cur = state.current
    nbr = g.adjacency[cur]
    c = len(nbr)
    feats = np.empty((c, N_FEATURES))
    feats[:, 0:2] = g.positions[nbr]
    feats[:, 2] = state.node_mean[nbr]
    feats[:, 3] = state.node_var[nbr]
    feats[:, 4] = g.edge_length[cur]
    feats[:, 5] = state.geo.dist[nbr]
    feats[:, 6] = state.remaining_budget
    feats[:, 7] = state.node_mean[cur]
    feats[:, 8] = state.node_var[cur]
    feats[:, 9] = state.trace_now / state.cfg.prior_trace
    return feats, state.mask()


def node_features(state: BeliefState) -> np.ndarray:
    return np.column_stack([state.graph.positions, state.node_mean, state.node_var])


Policy = Callable[[BeliefState, np.ndarray, np.ndarray], int]


@dataclass
class Rollout:
    initial: BeliefState
    final: BeliefState
    transitions: list = dc_field(default_factory=list)
    traces: list = dc_field(default_factory=list)  # Tr(P) before the first step, then after each

    @property
    def path(self) -> tuple[int, ...]:
        return self.final.history

    @property
    def path_length(self) -> float:
        return self.final.traveled


def rollout(state: BeliefState, policy: Policy, full_state: bool = False) -> Rollout:
    """Run `policy(state, features, mask) -> candidate index` until done."""
    out = Rollout(state, state, [], [state.trace_now])
    feats, mask = candidate_features(state)
    while not state.done:
        a = int(policy(state, feats, mask))
        nodes = node_features(state) if full_state else None
        nxt, r, done = step(state, a)
        nfeats, nmask = candidate_features(nxt)
        out.transitions.append(Transition(feats, mask, a, r, nfeats, nmask, done, nodes))
        out.traces.append(nxt.trace_now)
        state, feats, mask = nxt, nfeats, nmask
    out.final = state
    return out
