"""Dataset generation, evaluation, sweeps and timing studies.

Every episode's randomness is derived from (master seed, episode index), so
results do not depend on the worker count or scheduling order.
"""

from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .dataset_io import EpisodeRecord, TransitionTable, load_table, write_dataset
from .episode import EnvConfig, reset, rollout
from .errors import ConfigurationError
from .nn import ParamSet, load_checkpoint, save_checkpoint
from .offline_rl import (TrainConfig, bc_select_action, bcq_select_action, train_offline,
                         write_metrics)
from .planners import PlannerKind, make_policy, rand_orienteering_from

log = logging.getLogger(__name__)

GEN_DOMAIN = 0
EVAL_DOMAIN = 1


def max_workers(requested: int = 1) -> int:
    cap = os.environ.get("OFFRIPP_THREADS")
    n = max(int(requested), 1)
    if cap:
        n = min(n, max(int(cap), 1))
    return n


def episode_seeds(seed: int, index: int, domain: int = GEN_DOMAIN):
    """(field_seed, graph_seed, stream_seed) for one episode."""
    state = np.random.SeedSequence([seed, domain, index]).generate_state(3, dtype=np.uint32)
    return int(state[0]), int(state[1]), int(state[2])


# ---------------------------------------------------------------- generation


def generate_episode(planner: PlannerKind, seed: int, index: int,
                     budget_range=(6.0, 8.0), cfg: EnvConfig = EnvConfig(),
                     full_state: bool = False) -> EpisodeRecord:
    field_seed, graph_seed, stream = episode_seeds(seed, index)
    rng = np.random.default_rng(stream)
    budget = float(rng.uniform(*budget_range))
    state = reset(cfg, field_seed, graph_seed, budget)
    try:
        ro = rollout(state, make_policy(planner, rng), full_state=full_state)
    except Exception as exc:
        raise RuntimeError(f"planner {planner.name} failed on episode {index}: {exc}") from exc
    meta = {
        "field_seed": field_seed,
        "graph_seed": graph_seed,
        "planner": {"name": planner.name, **planner.params()},
        "episode_index": index,
        "master_seed": seed,
    }
    return EpisodeRecord.from_rollout(ro, meta)


def _gen_job(args):
    return generate_episode(*args)


def generate_records(planner: PlannerKind, episodes: int, seed: int, budget_range=(6.0, 8.0),
                     cfg: EnvConfig = EnvConfig(), workers: int = 1, full_state: bool = False):
    """Yield records in index order."""
    jobs = ((planner, seed, i, tuple(budget_range), cfg, full_state) for i in range(episodes))
    n = max_workers(workers)
    if n == 1 or episodes < 2:
        for j in jobs:
            yield _gen_job(j)
        return
    with mp.get_context("spawn").Pool(n) as pool:
        yield from pool.imap(_gen_job, jobs, chunksize=4)


def gen_dataset(planner: PlannerKind, episodes: int, seed: int, out_path, budget_range=(6.0, 8.0),
                workers: int = 1, cfg: EnvConfig = EnvConfig(), full_state: bool = False):
    return write_dataset(generate_records(planner, episodes, seed, budget_range, cfg, workers, full_state),
                         out_path)


# ---------------------------------------------------------------- policies


@dataclass
class PolicySpec:
    """A named evaluation policy: a planner, or checkpoint params used via BCQ or BC selection."""

    name: str
    planner: Optional[PlannerKind] = None
    params: Optional[ParamSet] = None
    mode: str = "bcq"  # bcq | bc
    tau: float = 0.3

    def make(self, rng: np.random.Generator):
        if self.planner is not None:
            return make_policy(self.planner, rng)
        p, tau = self.params, self.tau
        if self.mode == "bc":
            return lambda s, f, m: bc_select_action(p, f, m)
        return lambda s, f, m: bcq_select_action(p, f, m, tau)


def policy_from_checkpoint(path, mode: Optional[str] = None, name: Optional[str] = None) -> PolicySpec:
    params, head = load_checkpoint(path)
    role = head.get("role", "offripp")
    mode = mode or ("bc" if role == "bc" else "bcq")
    return PolicySpec(name or f"{Path(path).stem}:{mode}", params=params, mode=mode,
                      tau=float(head.get("tau", 0.3)))


# ---------------------------------------------------------------- evaluation


@dataclass
class EpisodeResult:
    policy: str
    budget: float
    env_index: int
    final_trace: float
    path_length: float
    steps: int
    planning_time: float
    reached_dest: bool
    start: int = -1
    dest: int = -1


def _timed(policy):
    acc = [0.0]

    def wrapped(s, f, m):
        t0 = time.perf_counter()
        a = policy(s, f, m)
        acc[0] += time.perf_counter() - t0
        return a

    return wrapped, acc


def eval_episode(spec: PolicySpec, budget: float, seed: int, index: int,
                 cfg: EnvConfig = EnvConfig()) -> EpisodeResult:
    field_seed, graph_seed, stream = episode_seeds(seed, index, EVAL_DOMAIN)
    state = reset(cfg, field_seed, graph_seed, budget)
    policy, acc = _timed(spec.make(np.random.default_rng(stream)))
    ro = rollout(state, policy)
    return EpisodeResult(spec.name, float(budget), index, ro.final.trace_now, ro.final.traveled,
                         ro.final.step_count, acc[0], ro.final.current == ro.final.dest,
                         state.current, state.dest)


def _eval_job(args):
    return eval_episode(*args)


def evaluate(specs: Sequence[PolicySpec], budgets: Sequence[float], n_envs: int = 50, seed: int = 0,
             cfg: EnvConfig = EnvConfig(), workers: int = 1) -> list[EpisodeResult]:
    """Run every policy on the same `n_envs` instances per budget."""
    jobs = [(spec, float(b), seed, i, cfg) for spec in specs for b in budgets for i in range(n_envs)]
    n = max_workers(workers)
    if n == 1:
        return [_eval_job(j) for j in jobs]
    with mp.get_context("spawn").Pool(n) as pool:
        return list(pool.imap(_eval_job, jobs, chunksize=4))


def summarize(results: Sequence[EpisodeResult]) -> list[dict]:
    rows, groups = [], {}
    for r in results:
        groups.setdefault((r.policy, r.budget), []).append(r)
    for (policy, budget), rs in groups.items():
        tr = np.array([r.final_trace for r in rs])
        rows.append({
            "policy": policy,
            "budget": budget,
            "n_envs": len(rs),
            "mean_trace": float(tr.mean()),
            "std_trace": float(tr.std()),
            "mean_time_s": float(np.mean([r.planning_time for r in rs])),
            "budget_violations": sum(r.path_length > r.budget + 1e-9 for r in rs),
        })
    return rows


def write_csv(rows: Sequence[dict], path, meta: dict) -> None:
    """CSV with a header row and a trailing `# key=value ...` metadata line."""
    meta = {"version": __version__, **meta}
    with open(path, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------- training


def train_and_save(table: TransitionTable, cfg: TrainConfig, out_model, dataset_checksum: str = ""):
    """Train, then write `<out>` (OffRIPP), `<out>.bc` (behavior head) and `<out>.metrics.csv`."""
    out_model = Path(out_model)
    out_model.parent.mkdir(parents=True, exist_ok=True)
    result = train_offline(table, cfg)
    hyper = {"tau": cfg.tau, "gamma": cfg.gamma, "lr": cfg.lr, "batch_size": cfg.batch_size,
             "target_update_every": cfg.target_update_every, "seed": cfg.seed,
             "epochs": cfg.epochs, "bc_weight": cfg.bc_weight, "dataset_checksum": dataset_checksum}
    csum = save_checkpoint(out_model, result.params, {"role": "offripp", **hyper})
    bc_path = out_model.with_name(out_model.name + ".bc")
    save_checkpoint(bc_path, result.bc_params, {"role": "bc", **hyper})
    metrics_path = out_model.with_name(out_model.name + ".metrics.csv")
    write_metrics(result.metrics, metrics_path,
                  comment=f"seed={cfg.seed} tau={cfg.tau} version={__version__}")
    return result, csum, bc_path, metrics_path


# ---------------------------------------------------------------- sweep


def sweep(table: TransitionTable, sizes: Sequence[int], taus: Sequence[float], seed: int,
          budget: float = 8.0, n_envs: int = 50, base: TrainConfig = TrainConfig(),
          cfg: EnvConfig = EnvConfig(), workers: int = 1) -> list[dict]:
    """Train on nested prefixes of a shuffled master dataset for each (size, tau) cell."""
    n_ep = len(table.episode_bounds)
    if max(sizes) > n_ep:
        raise ConfigurationError(f"sweep size {max(sizes)} exceeds master dataset ({n_ep} episodes)")
    order = np.random.default_rng([seed, 3]).permutation(n_ep)
    rows = []
    for size in sizes:
        sub = table.subset_episodes(order[:size])
        for tau in taus:
            tcfg = TrainConfig(**{**base.__dict__, "tau": float(tau), "seed": seed})
            t0 = time.perf_counter()
            res = train_offline(sub, tcfg)
            train_time = time.perf_counter() - t0
            spec = PolicySpec(f"offripp[n={size},tau={tau:g}]", params=res.params, tau=float(tau))
            summ = summarize(evaluate([spec], [budget], n_envs, seed, cfg, workers))[0]
            rows.append({
                "episodes": size, "tau": float(tau), "transitions": len(sub), "budget": budget,
                "mean_trace": summ["mean_trace"], "std_trace": summ["std_trace"],
                "max_mean_q": res.max_mean_q, "final_td_loss": res.metrics[-1][1] if res.metrics else float("nan"),
                "train_time_s": train_time,
            })
            log.info("sweep cell %s", rows[-1])
    return rows


# ---------------------------------------------------------------- timing


def bench_time(params: ParamSet, tau: float, budget: float = 8.0, n: int = 20, samples: int = 64,
               seed: int = 0, cfg: EnvConfig = EnvConfig()) -> list[dict]:
    """Per-trajectory planning time of the learned policy vs. the sampling baseline.

    Only decision-making time is counted; the environment's own GP updates are
    excluded for both.
    """
    rows = []
    learned = PolicySpec("offripp", params=params, tau=tau)
    baseline = PolicySpec(f"rand_orienteering[{samples}]",
                          planner=PlannerKind("rand_orienteering", samples=samples))
    for i in range(n):
        for spec in (learned, baseline):
            r = eval_episode(spec, budget, seed, i, cfg)
            rows.append({"policy": spec.name, "env_index": i, "budget": budget,
                         "planning_time_s": r.planning_time, "steps": r.steps,
                         "per_decision_s": r.planning_time / max(r.steps, 1),
                         "final_trace": r.final_trace})
    return rows


def orienteering_scaling(samples_list: Sequence[int], budget: float = 8.0, seed: int = 0,
                         cfg: EnvConfig = EnvConfig()) -> list[dict]:
    field_seed, graph_seed, _ = episode_seeds(seed, 0, EVAL_DOMAIN)
    state = reset(cfg, field_seed, graph_seed, budget)
    rows = []
    for s in samples_list:
        t0 = time.perf_counter()
        plan = rand_orienteering_from(state, s, seed)
        rows.append({"samples": s, "time_s": time.perf_counter() - t0, "final_trace": plan.final_trace})
    return rows
