"""Command-line entry point: ``offripp <subcommand> ...``.

Exit status is 0 on success, 2 for invalid inputs and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .dataset_io import dataset_stats, load_table, read_manifest
from .episode import EnvConfig
from .errors import ConfigurationError
from .harness import (PolicySpec, bench_time, evaluate, gen_dataset, policy_from_checkpoint,
                      summarize, sweep, train_and_save, write_csv)
from .nn import load_checkpoint
from .offline_rl import TrainConfig
from .planners import KINDS, PlannerKind

log = logging.getLogger("offripp")


def _planner(args) -> PlannerKind:
    return PlannerKind(args.planner, depth=args.depth, eps=args.eps, samples=args.samples,
                       time_cap=args.time_cap)


def _train_config(args, tau=None) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, target_update_every=args.target_update_every,
                       tau=args.tau if tau is None else tau, gamma=args.gamma, lr=args.lr,
                       epochs=args.epochs, bc_pretrain_epochs=args.bc_epochs, seed=args.seed,
                       hidden=args.hidden, bc_weight=args.bc_weight, max_steps=args.max_steps)


def _emit(rows, out, meta):
    if out:
        write_csv(rows, out, meta)
        log.info("wrote %s", out)
    else:
        for r in rows:
            print(json.dumps(r))


def cmd_gen_dataset(args) -> int:
    planner = _planner(args)
    man = gen_dataset(planner, args.episodes, args.seed, args.out, tuple(args.budget_range),
                      args.workers, full_state=args.full_state)
    print(json.dumps(man.to_dict()))
    return 0


def cmd_train(args) -> int:
    table = load_table(args.dataset)
    cfg = _train_config(args)
    _, csum, bc_path, metrics_path = train_and_save(table, cfg, args.out,
                                                    read_manifest(args.dataset).checksum)
    print(json.dumps({"model": str(args.out), "checksum": f"{csum:016x}", "bc_model": str(bc_path),
                      "metrics": str(metrics_path)}))
    return 0


def cmd_eval(args) -> int:
    specs = []
    for path in args.model or []:
        spec = policy_from_checkpoint(path)
        if args.tau is not None:
            spec.tau = args.tau
        specs.append(spec)
    for name in args.planner or []:
        specs.append(PolicySpec(name, planner=PlannerKind(name, depth=args.depth, eps=args.eps,
                                                          samples=args.samples)))
    if not specs:
        raise ConfigurationError("eval needs at least one --model or --planner")
    results = evaluate(specs, args.budget, args.n_envs, args.seed, workers=args.workers)
    _emit(summarize(results), args.out, {"seed": args.seed, "n_envs": args.n_envs})
    return 0


def cmd_sweep(args) -> int:
    table = load_table(args.dataset)
    rows = sweep(table, args.sizes, args.tau, args.seed, args.budget, args.n_envs,
                 base=_train_config(args, tau=args.tau[0]), workers=args.workers)
    _emit(rows, args.out, {"seed": args.seed, "dataset": read_manifest(args.dataset).checksum})
    return 0


def cmd_bench_time(args) -> int:
    params, head = load_checkpoint(args.model)
    tau = args.tau if args.tau is not None else float(head.get("tau", 0.3))
    rows = bench_time(params, tau, args.budget, args.n, args.samples, args.seed)
    _emit(rows, args.out, {"seed": args.seed, "samples": args.samples})
    return 0


def cmd_stats(args) -> int:
    _emit(dataset_stats(args.dataset), args.out, {"dataset": read_manifest(args.dataset).checksum})
    return 0


def _add_planner_flags(p):
    p.add_argument("--depth", type=int, default=2, help="lookahead depth")
    p.add_argument("--eps", type=float, default=0.4, help="mixture exploration rate")
    p.add_argument("--samples", type=int, default=64, help="orienteering sample count")


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--target-update-every", type=int, default=d.target_update_every)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--bc-epochs", type=int, default=d.bc_pretrain_epochs)
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--bc-weight", type=float, default=d.bc_weight)
    p.add_argument("--max-steps", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="offripp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="roll out a planner and log transitions")
    p.add_argument("--planner", choices=KINDS, required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget-range", type=float, nargs=2, default=[6.0, 8.0], metavar=("LO", "HI"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--time-cap", type=float, default=None, help="orienteering time cap in seconds")
    p.add_argument("--full-state", action="store_true", help="also store per-node features")
    _add_planner_flags(p)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="behavior pretraining plus constrained Q-learning")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--tau", type=float, default=TrainConfig.tau)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints and planners on paired instances")
    p.add_argument("--model", type=Path, action="append", help="checkpoint (repeatable)")
    p.add_argument("--planner", choices=KINDS, action="append", help="planner (repeatable)")
    p.add_argument("--budget", type=float, nargs="+", default=list(EnvConfig().eval_budgets))
    p.add_argument("--n-envs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=None, help="override checkpoint tau")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path)
    _add_planner_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate over dataset sizes and tau values")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--sizes", type=int, nargs="+", default=[500, 2000])
    p.add_argument("--tau", type=float, nargs="+", default=[TrainConfig.tau])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=float, default=8.0)
    p.add_argument("--n-envs", type=int, default=50)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench-time", help="planning time of a checkpoint vs random orienteering")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--budget", type=float, default=8.0)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench_time)

    p = sub.add_parser("stats", help="summary statistics of a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ValueError, FileNotFoundError) as exc:
        print(f"offripp {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"offripp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
