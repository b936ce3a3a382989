import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from offripp.field import (GaussianBlob, IntensityField, field_from_blobs, lipschitz_bound,
                           make_field, mixture, sample_field)


def naive_value(field, p):
    total = 0.0
    for b in field.blobs:
        (cx, cy), (sx, sy), w = b.center, b.stddev, b.weight
        total += w / (2 * math.pi * sx * sy) * math.exp(
            -0.5 * (((p[0] - cx) / sx) ** 2 + ((p[1] - cy) / sy) ** 2))
    return min(max(total / field.peak, 0.0), 1.0)


def test_deterministic():
    assert make_field(7) == make_field(7)
    assert make_field(7) != make_field(8)


@given(st.integers(0, 2**63 - 1))
def test_blob_count_and_ranges(seed):
    f = make_field(seed)
    assert 8 <= len(f.blobs) <= 12
    assert f.peak > 0
    for b in f.blobs:
        assert all(0 <= c <= 1 for c in b.center)
        assert all(0.05 <= s <= 0.25 for s in b.stddev)
        assert 0.5 <= b.weight <= 1.0


def test_grid_maximum_is_one():
    f = make_field(0)
    g = np.linspace(0, 1, 100)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    vals = sample_field(f, pts)
    assert vals.max() == pytest.approx(1.0, abs=1e-12)
    # brute-force peak on a grid 4x finer overshoots the cached peak only slightly
    fine = np.linspace(0, 1, 400)
    fx, fy = np.meshgrid(fine, fine, indexing="ij")
    raw = mixture(f.blobs, np.column_stack([fx.ravel(), fy.ravel()])).max()
    assert raw / f.peak < 1.05


def test_single_blob_center_is_peak():
    f = field_from_blobs([GaussianBlob((0.37, 0.61), (0.08, 0.15), 0.7)])
    assert sample_field(f, (0.37, 0.61)) == pytest.approx(1.0, abs=0.05)


def test_far_point_in_tail():
    f = field_from_blobs([GaussianBlob((0.1, 0.1), (0.05, 0.05), 1.0)])
    assert sample_field(f, (0.9, 0.9)) < 1e-3


@given(st.integers(0, 10**6), st.floats(0, 1), st.floats(0, 1))
def test_matches_direct_formula(seed, x, y):
    f = make_field(seed)
    assert sample_field(f, (x, y)) == pytest.approx(naive_value(f, (x, y)), abs=1e-12)


def test_range_on_many_points(rng):
    for seed in range(10):
        v = sample_field(make_field(seed), rng.uniform(0, 1, size=(100_000, 2)))
        assert v.min() >= 0.0 and v.max() <= 1.0


def test_lipschitz_proxy(rng):
    f = make_field(3)
    lip = lipschitz_bound(f)
    p = rng.uniform(1e-3, 1 - 1e-3, size=(10_000, 2))
    d = rng.normal(size=(10_000, 2))
    d *= 1e-4 / np.linalg.norm(d, axis=1, keepdims=True)
    q = np.clip(p + d, 0, 1)
    diff = np.abs(sample_field(f, p) - sample_field(f, q))
    assert np.all(diff <= lip * np.linalg.norm(q - p, axis=1) + 1e-15)


@pytest.mark.parametrize("p", [(-0.1, 0.5), (0.5, 1.0001), (2, 2)])
def test_outside_unit_square(p):
    with pytest.raises(ValueError):
        sample_field(make_field(1), p)


def test_invalid_blob():
    with pytest.raises(ValueError):
        GaussianBlob((0.5, 0.5), (0.0, 0.1), 1.0)
    with pytest.raises(ValueError):
        GaussianBlob((0.5, 1.5), (0.1, 0.1), 1.0)


def test_serialization_roundtrip():
    f = make_field(42)
    assert IntensityField.from_dict(f.to_dict()) == f
