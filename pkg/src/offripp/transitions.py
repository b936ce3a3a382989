"""Logged decision records shared by the environment, storage and trainer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

N_FEATURES = 10
FEATURE_NAMES = (
    "x", "y", "mean", "var", "edge_length", "dist_to_dest",
    "remaining_budget", "mean_current", "var_current", "trace_ratio",
)


@dataclass(frozen=True, eq=False)
class Transition:
    state_features: np.ndarray  # (C, F)
    mask: np.ndarray  # (C,)
    action: int
    reward: float
    next_features: np.ndarray
    next_mask: np.ndarray
    done: bool
    nodes: Optional[np.ndarray] = None  # (N, 4) node features, full-state mode only
