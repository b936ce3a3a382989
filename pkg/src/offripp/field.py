"""Ground-truth light-intensity field: a normalized mixture of 2D Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_BLOBS = 8
MAX_BLOBS = 12
STDDEV_RANGE = (0.05, 0.25)
WEIGHT_RANGE = (0.5, 1.0)
PEAK_GRID = 100


@dataclass(frozen=True)
class GaussianBlob:
    center: tuple[float, float]
    stddev: tuple[float, float]
    weight: float

    def __post_init__(self):
        if not all(0.0 <= c <= 1.0 for c in self.center):
            raise ValueError(f"blob center {self.center} outside unit square")
        if not all(s > 0.0 for s in self.stddev):
            raise ValueError(f"blob stddev {self.stddev} must be positive")
        if not self.weight > 0.0:
            raise ValueError(f"blob weight {self.weight} must be positive")

    def to_dict(self) -> dict:
        return {"center": list(self.center), "stddev": list(self.stddev), "weight": self.weight}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianBlob":
        return cls(tuple(d["center"]), tuple(d["stddev"]), d["weight"])


@dataclass(frozen=True)
class IntensityField:
    blobs: tuple[GaussianBlob, ...]
    peak: float

    def to_dict(self) -> dict:
        return {"blobs": [b.to_dict() for b in self.blobs], "peak": self.peak}

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityField":
        return cls(tuple(GaussianBlob.from_dict(b) for b in d["blobs"]), d["peak"])

    def _arrays(self):
        centers = np.array([b.center for b in self.blobs])
        stddevs = np.array([b.stddev for b in self.blobs])
        weights = np.array([b.weight for b in self.blobs])
        return centers, stddevs, weights


def mixture(blobs, points) -> np.ndarray:
    """Raw (unnormalized) mixture density at an (n, 2) array of points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    centers = np.array([b.center for b in blobs])
    stddevs = np.array([b.stddev for b in blobs])
    weights = np.array([b.weight for b in blobs])
    z = (points[:, None, :] - centers[None, :, :]) / stddevs[None, :, :]
    norm = weights / (2.0 * np.pi * stddevs[:, 0] * stddevs[:, 1])
    return np.exp(-0.5 * np.sum(z * z, axis=-1)) @ norm


def make_field(seed: int) -> IntensityField:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(MIN_BLOBS, MAX_BLOBS + 1))
    centers = rng.uniform(0.0, 1.0, size=(n, 2))
    stddevs = rng.uniform(*STDDEV_RANGE, size=(n, 2))
    weights = rng.uniform(*WEIGHT_RANGE, size=n)
    return field_from_blobs(
        GaussianBlob((float(c[0]), float(c[1])), (float(s[0]), float(s[1])), float(w))
        for c, s, w in zip(centers, stddevs, weights)
    )


def field_from_blobs(blobs) -> IntensityField:
    """Wrap blobs into a field normalized by the mixture maximum on the peak grid."""
    blobs = tuple(blobs)
    g = np.linspace(0.0, 1.0, PEAK_GRID)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    peak = float(mixture(blobs, grid).max())
    return IntensityField(blobs, peak)


def sample_field(field: IntensityField, p) -> np.ndarray | float:
    """Normalized intensity in [0, 1] at a point or an (n, 2) array of points.

    Raises ValueError for points outside the unit square.
    """
    arr = np.asarray(p, dtype=float)
    pts = np.atleast_2d(arr)
    if pts.shape[-1] != 2:
        raise ValueError(f"expected 2D points, got shape {arr.shape}")
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ValueError("point outside the unit square")
    vals = np.clip(mixture(field.blobs, pts) / field.peak, 0.0, 1.0)
    if arr.ndim == 1:
        return float(vals[0])
    return vals


def lipschitz_bound(field: IntensityField) -> float:
    # |d/dx exp(-z^2/2)| <= exp(-1/2)/sigma per blob
    centers, stddevs, weights = field._arrays()
    norm = weights / (2.0 * np.pi * stddevs[:, 0] * stddevs[:, 1])
    return float(np.sum(norm * np.exp(-0.5) / stddevs.min(axis=1)) / field.peak)
