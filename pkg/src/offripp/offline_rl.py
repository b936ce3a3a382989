"""Batch-constrained offline Q-learning over logged IPP episodes.

Reads only `TransitionTable`s; nothing here touches the environment.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dataset_io import TransitionTable
from .errors import ConfigurationError, NumericalError
from .nn import (AdamState, ParamSet, adam_step, admissible, forward_heads, grad_check,
                 init_params, nll_loss_grad, td_loss_grad)
from .transitions import N_FEATURES

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "td_loss", "mean_q", "sync_flag")
GRAD_GATE_TOL = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    target_update_every: int = 100
    tau: float = 0.3
    gamma: float = 0.99
    lr: float = 1e-3
    epochs: int = 1
    bc_pretrain_epochs: int = 1
    seed: int = 0
    hidden: int = 64
    # weight of the behavior NLL kept in the loss during TD training (shared trunk)
    bc_weight: float = 1.0
    max_steps: Optional[int] = None  # caps TD gradient steps; None = epochs over the data
    grad_gate: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.target_update_every < 1:
            raise ConfigurationError("batch_size and target_update_every must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError(f"tau={self.tau} outside [0, 1]")
        # gamma=0 (pure reward regression) is allowed as a degenerate check
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma={self.gamma} outside [0, 1]")


@dataclass
class TargetSnapshot:
    params: ParamSet
    steps_since_sync: int = 0

    def sync(self, main: ParamSet) -> None:
        self.params.flat[:] = main.flat
        self.steps_since_sync = 0


@dataclass
class TrainResult:
    params: ParamSet
    bc_params: ParamSet
    bc_losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)  # (step, td_loss, mean_q, sync_flag)

    @property
    def max_mean_q(self) -> float:
        return max((m[2] for m in self.metrics), default=float("nan"))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def gradient_gate(table: TransitionTable, cfg: TrainConfig, n_probe: int = 16, n_coords: int = 60) -> float:
    """Finite-difference check of both losses on a probe batch; raises if either disagrees."""
    params = init_params(cfg.seed, N_FEATURES, cfg.hidden)
    # perturb the heads so the probe is not at the symmetric zero-logit point
    rng = np.random.default_rng([cfg.seed, 9])
    params.flat += 0.1 * rng.standard_normal(params.size)
    target = params.copy()
    target.flat += 0.05 * rng.standard_normal(params.size)
    batch = table.batch(np.arange(min(n_probe, len(table))))
    worst = max(
        grad_check(params, lambda p: nll_loss_grad(p, batch), n_coords=n_coords, seed=cfg.seed),
        grad_check(params, lambda p: td_loss_grad(p, target, batch, cfg.gamma, cfg.tau),
                   n_coords=n_coords, seed=cfg.seed + 1),
    )
    if worst >= GRAD_GATE_TOL:
        raise NumericalError(f"gradient check failed: max relative error {worst:.3g}")
    return worst


def pretrain_behavior(table: TransitionTable, cfg: TrainConfig, params: Optional[ParamSet] = None,
                      losses: Optional[list] = None) -> ParamSet:
    """Fit the behavior head (and shared trunk) by minibatch NLL with Adam."""
    if len(table) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if params is None:
        params = init_params(cfg.seed, N_FEATURES, cfg.hidden)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = AdamState.for_params(params, cfg.lr)
    for epoch in range(cfg.bc_pretrain_epochs):
        epoch_losses = []
        for idx in _minibatches(len(table), cfg.batch_size, rng):
            loss, grads = nll_loss_grad(params, table.batch(idx))
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite NLL at epoch {epoch}")
            adam_step(params, grads, opt)
            epoch_losses.append(loss)
        if losses is not None:
            losses.extend(epoch_losses)
        log.info("bc epoch %d: mean nll %.4f", epoch, float(np.mean(epoch_losses)))
    return params


def bcq_select_action(params: ParamSet, features: np.ndarray, mask: np.ndarray, tau: float) -> int:
    """argmax Q over candidates with behavior prob >= tau * max prob (lowest index on ties)."""
    probs, q = forward_heads(params, features, mask)
    adm = admissible(probs, np.asarray(mask, dtype=bool), tau)
    return int(np.argmax(np.where(adm, q, -np.inf)))


def bc_select_action(params: ParamSet, features: np.ndarray, mask: np.ndarray) -> int:
    probs, _ = forward_heads(params, features, mask)
    return int(np.argmax(probs))


def train_offline(table: TransitionTable, cfg: TrainConfig, metrics_path=None,
                  on_step: Optional[Callable] = None) -> TrainResult:
    """Behavior pretraining followed by batch-constrained TD training.

    `on_step(step, params, target, synced)` is called after every gradient step.
    """
    if len(table) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if cfg.grad_gate:
        log.info("gradient gate: max rel err %.2e", gradient_gate(table, cfg))
    bc_losses: list = []
    params = pretrain_behavior(table, cfg, losses=bc_losses)
    bc_params = params.copy()
    target = TargetSnapshot(params.copy())
    opt = AdamState.for_params(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    steps_per_epoch = math.ceil(len(table) / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch
    metrics = []
    step = 0
    while step < total:
        for idx in _minibatches(len(table), cfg.batch_size, rng):
            if step >= total:
                break
            batch = table.batch(idx)
            loss, grads, q_sa = td_loss_grad(params, target.params, batch, cfg.gamma, cfg.tau)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite TD loss at step {step} (mean |Q| {np.mean(np.abs(q_sa)):.3g})")
            if cfg.bc_weight:
                _, bc_grads = nll_loss_grad(params, batch)
                grads.flat += cfg.bc_weight * bc_grads.flat
            adam_step(params, grads, opt)
            step += 1
            target.steps_since_sync += 1
            synced = target.steps_since_sync >= cfg.target_update_every
            if synced:
                target.sync(params)
                log.info("step %d: td_loss %.4f mean_q %.4f (target synced)", step, loss, q_sa.mean())
            metrics.append((step, loss, float(np.mean(q_sa)), int(synced)))
            if on_step is not None:
                on_step(step, params, target.params, synced)
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return TrainResult(params, bc_params, bc_losses, metrics)


def write_metrics(metrics, path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for step, loss, mean_q, sync in metrics:
            w.writerow([step, repr(loss), repr(mean_q), sync])
        if comment:
            fh.write(f"# {comment}\n")
