"""Gaussian-process belief with an isotropic RBF kernel and zero prior mean.

`GpModel` is the plain posterior (observations + Cholesky factor).  `ProbeSet`
layers a cache of whitened cross-covariances over a fixed set of probe points
so that posterior mean/variance at those points can be refreshed in O(M * P)
per observation instead of being recomputed from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import NumericalError

BASE_JITTER = 1e-8
MAX_JITTER = 1e-2


@dataclass(frozen=True)
class GpHyper:
    lengthscale: float = 0.125
    signal_var: float = 1.0
    noise_var: float = 1e-4

    def __post_init__(self):
        if not self.lengthscale > 0 or not self.signal_var > 0 or not self.noise_var >= 0:
            raise ValueError(f"invalid GP hyperparameters {self}")


def rbf(a, b, hyper: GpHyper) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    np.maximum(d2, 0.0, out=d2)
    return hyper.signal_var * np.exp(-0.5 * d2 / hyper.lengthscale**2)


def unit_grid(n: int = 30) -> np.ndarray:
    """Cell-free uniform n x n grid over [0, 1]^2 including the borders."""
    g = np.linspace(0.0, 1.0, n)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True, eq=False)
class GpModel:
    hyper: GpHyper
    obs_X: np.ndarray
    obs_Y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = BASE_JITTER

    @property
    def n_obs(self) -> int:
        return len(self.obs_Y)


def _check_points(x):
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("GP query/observation outside the unit square")


def _initial_jitter(hyper: GpHyper) -> float:
    # a noise term at least as large as the base jitter already regularizes the diagonal
    return 0.0 if hyper.noise_var >= BASE_JITTER else BASE_JITTER


def empty_gp(hyper: GpHyper = GpHyper()) -> GpModel:
    z = np.zeros((0, 2))
    return GpModel(hyper, z, np.zeros(0), np.zeros((0, 0)), np.zeros(0), _initial_jitter(hyper))


def fit(hyper: GpHyper, X, Y) -> GpModel:
    """Batch fit; on factorization failure the diagonal jitter escalates 1e-8, 1e-7, ... 1e-2."""
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    _check_points(X)
    K = rbf(X, X, hyper)
    jitter = _initial_jitter(hyper)
    while jitter <= MAX_JITTER * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(K + (hyper.noise_var + jitter) * np.eye(len(X)))
        except np.linalg.LinAlgError:
            jitter = BASE_JITTER if jitter == 0.0 else 10.0 * jitter
            continue
        alpha = cho_solve((L, True), Y) if len(X) else np.zeros(0)
        return GpModel(hyper, X, Y, L, alpha, jitter)
    raise NumericalError(f"Gram matrix not positive definite with jitter up to {MAX_JITTER}")


def _append_factor(gp: GpModel, x: np.ndarray):
    """Rank-1 Cholesky extension; returns (l, d) or None when it breaks down."""
    kx = rbf(gp.obs_X, x[None, :], gp.hyper)[:, 0]
    l = solve_triangular(gp.chol, kx, lower=True) if gp.n_obs else np.zeros(0)
    d2 = gp.hyper.signal_var + gp.hyper.noise_var + gp.jitter - l @ l
    if not d2 > 0.0 or not np.isfinite(d2):
        return None
    return l, float(np.sqrt(d2))


def add_observation(gp: GpModel, x, y: float) -> GpModel:
    x = np.asarray(x, dtype=float).reshape(2)
    _check_points(x)
    return _extended(gp, x, y, _append_factor(gp, x))


def _extended(gp: GpModel, x: np.ndarray, y: float, ext) -> GpModel:
    X = np.vstack([gp.obs_X, x])
    Y = np.append(gp.obs_Y, float(y))
    if ext is None:
        return fit(gp.hyper, X, Y)
    l, d = ext
    m = gp.n_obs
    L = np.zeros((m + 1, m + 1))
    L[:m, :m] = gp.chol
    L[m, :m] = l
    L[m, m] = d
    alpha = cho_solve((L, True), Y)
    return GpModel(gp.hyper, X, Y, L, alpha, gp.jitter)


def predict(gp: GpModel, Xstar, full_cov: bool = False):
    """Posterior mean and covariance (full matrix) or variances at `Xstar`."""
    Xs = np.asarray(Xstar, dtype=float).reshape(-1, 2)
    _check_points(Xs)
    h = gp.hyper
    if gp.n_obs == 0:
        mean = np.zeros(len(Xs))
        if full_cov:
            return mean, rbf(Xs, Xs, h)
        return mean, np.full(len(Xs), h.signal_var)
    Ks = rbf(Xs, gp.obs_X, h)
    mean = Ks @ gp.alpha
    V = solve_triangular(gp.chol, Ks.T, lower=True)
    if full_cov:
        cov = rbf(Xs, Xs, h) - V.T @ V
        return mean, 0.5 * (cov + cov.T)
    return mean, h.signal_var - np.sum(V * V, axis=0)


def trace_cov(gp: GpModel, grid) -> float:
    _, var = predict(gp, grid, full_cov=False)
    return float(np.sum(var))


@dataclass(frozen=True, eq=False)
class ProbeSet:
    """Posterior mean/variance cached at fixed probe points.

    `white` holds L^{-1} K(X, probes), one row per observation; appending an
    observation appends one row and updates mean/var by a rank-1 correction.
    """

    gp: GpModel
    probes: np.ndarray
    white: np.ndarray  # (M, P)
    white_y: np.ndarray  # L^{-1} Y
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def from_gp(cls, gp: GpModel, probes) -> "ProbeSet":
        probes = np.asarray(probes, dtype=float).reshape(-1, 2)
        if gp.n_obs:
            white = solve_triangular(gp.chol, rbf(gp.obs_X, probes, gp.hyper), lower=True)
            white_y = solve_triangular(gp.chol, gp.obs_Y, lower=True)
        else:
            white = np.zeros((0, len(probes)))
            white_y = np.zeros(0)
        mean = white.T @ white_y
        var = np.maximum(gp.hyper.signal_var - np.sum(white * white, axis=0), 0.0)
        return cls(gp, probes, white, white_y, mean, var)

    def add(self, x, y: float) -> "ProbeSet":
        x = np.asarray(x, dtype=float).reshape(2)
        gp = self.gp
        _check_points(x)
        ext = _append_factor(gp, x)
        new_gp = _extended(gp, x, y, ext)
        if ext is None or new_gp.jitter != gp.jitter:
            return ProbeSet.from_gp(new_gp, self.probes)
        l, d = ext
        row = (rbf(x[None, :], self.probes, gp.hyper)[0] - l @ self.white) / d
        wy = (float(y) - l @ self.white_y) / d
        return ProbeSet(
            new_gp,
            self.probes,
            np.vstack([self.white, row]),
            np.append(self.white_y, wy),
            self.mean + wy * row,
            np.maximum(self.var - row * row, 0.0),
        )

    def whiten(self, points) -> np.ndarray:
        """L^{-1} K(X, points) for arbitrary points."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.gp.n_obs == 0:
            return np.zeros((0, len(points)))
        return solve_triangular(self.gp.chol, rbf(self.gp.obs_X, points, self.gp.hyper), lower=True)

    def cross_cov(self, idx, points, white_pts=None) -> np.ndarray:
        """Posterior covariance between probes[idx] and `points`."""
        if white_pts is None:
            white_pts = self.whiten(points)
        return rbf(self.probes[idx], points, self.gp.hyper) - self.white[:, idx].T @ white_pts

    def point_cov(self, points, white_pts=None) -> np.ndarray:
        if white_pts is None:
            white_pts = self.whiten(points)
        return rbf(points, points, self.gp.hyper) - white_pts.T @ white_pts
