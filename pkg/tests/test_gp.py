import numpy as np
import pytest
from hypothesis import given, strategies as st

from offripp.errors import NumericalError
from offripp.gp import (GpHyper, ProbeSet, add_observation, empty_gp, fit, predict, rbf,
                        trace_cov, unit_grid)


def dense_oracle(hyper, X, Y, Xs):
    """Direct-inverse posterior with an explicit double loop for the kernel."""
    def k(a, b):
        out = np.empty((len(a), len(b)))
        for i, p in enumerate(a):
            for j, q in enumerate(b):
                out[i, j] = hyper.signal_var * np.exp(-np.sum((p - q) ** 2) / (2 * hyper.lengthscale**2))
        return out
    Kinv = np.linalg.inv(k(X, X) + hyper.noise_var * np.eye(len(X)))
    Ks = k(Xs, X)
    return Ks @ Kinv @ Y, k(Xs, Xs) - Ks @ Kinv @ Ks.T


def random_instance(rng, m, t):
    return rng.uniform(size=(m, 2)), rng.uniform(size=m), rng.uniform(size=(t, 2))


def test_prior():
    gp = empty_gp()
    mean, var = predict(gp, unit_grid(4))
    assert np.all(mean == 0) and np.all(var == 1.0)
    _, cov = predict(gp, unit_grid(3), full_cov=True)
    assert np.allclose(np.diag(cov), 1.0)
    assert trace_cov(gp, unit_grid(30)) == 900.0


def test_interpolation_limit():
    h = GpHyper(noise_var=1e-6)
    gp = add_observation(empty_gp(h), (0.4, 0.7), 0.83)
    mean, var = predict(gp, [(0.4, 0.7)])
    assert abs(mean[0] - 0.83) < 1e-3
    assert var[0] < 1e-5


def test_five_by_seven_oracle(rng):
    h = GpHyper(lengthscale=0.2, signal_var=1.0, noise_var=1e-4)
    X, Y, Xs = random_instance(rng, 5, 7)
    mean, cov = predict(fit(h, X, Y), Xs, full_cov=True)
    om, oc = dense_oracle(h, X, Y, Xs)
    assert np.max(np.abs(mean - om)) < 1e-8
    assert np.max(np.abs(cov - oc)) < 1e-8


@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 20))
def test_oracle_random(seed, m, t):
    rng = np.random.default_rng(seed)
    h = GpHyper()
    X, Y, Xs = random_instance(rng, m, t)
    gp = fit(h, X, Y)
    mean, cov = predict(gp, Xs, full_cov=True)
    _, var = predict(gp, Xs)
    om, oc = dense_oracle(h, X, Y, Xs)
    assert np.max(np.abs(mean - om)) < 1e-8
    assert np.max(np.abs(cov - oc)) < 1e-8
    assert np.max(np.abs(var - np.diag(oc))) < 1e-8
    assert np.max(np.abs(cov - cov.T)) < 1e-10
    assert np.linalg.eigvalsh(cov).min() >= -1e-8


def test_factor_reconstructs_gram(rng):
    X, Y, _ = random_instance(rng, 12, 1)
    gp = fit(GpHyper(), X, Y)
    K = rbf(X, X, gp.hyper) + (gp.hyper.noise_var + gp.jitter) * np.eye(12)
    assert np.max(np.abs(gp.chol @ gp.chol.T - K)) < 1e-8


def test_sequential_adds_match_batch_fit(rng):
    X, Y, Xs = random_instance(rng, 10, 15)
    gp = empty_gp()
    for x, y in zip(X, Y):
        gp = add_observation(gp, x, y)
    ref = fit(GpHyper(), X, Y)
    assert np.max(np.abs(gp.chol - ref.chol)) < 1e-8
    assert np.max(np.abs(gp.alpha - ref.alpha)) < 1e-8
    for a, b in zip(predict(gp, Xs, True), predict(ref, Xs, True)):
        assert np.max(np.abs(a - b)) < 1e-8


@given(st.integers(0, 2**32 - 1))
def test_variance_monotone_under_conditioning(seed):
    rng = np.random.default_rng(seed)
    probes = rng.uniform(size=(100, 2))
    gp = empty_gp()
    _, prev = predict(gp, probes)
    for x in rng.uniform(size=(8, 2)):
        gp = add_observation(gp, x, rng.uniform())
        _, var = predict(gp, probes)
        assert np.all(var <= prev + 1e-9)
        prev = var


@given(st.integers(0, 2**32 - 1))
def test_variance_independent_of_values(seed):
    rng = np.random.default_rng(seed)
    X, Y, Xs = random_instance(rng, 9, 12)
    _, v1 = predict(fit(GpHyper(), X, Y), Xs)
    _, v2 = predict(fit(GpHyper(), X, rng.normal(size=9) * 5), Xs)
    assert np.max(np.abs(v1 - v2)) < 1e-12


def test_trace_matches_dense_covariance(rng):
    X, Y, _ = random_instance(rng, 3, 1)
    gp = fit(GpHyper(), X, Y)
    grid = unit_grid(5)
    _, cov = predict(gp, grid, full_cov=True)
    assert trace_cov(gp, grid) == pytest.approx(np.trace(cov), abs=1e-8)
    assert trace_cov(gp, unit_grid(30)) < 900.0


def test_duplicate_points_noiseless_use_jitter():
    h = GpHyper(noise_var=0.0)
    gp = fit(h, [(0.5, 0.5)] * 4, [0.1, 0.1, 0.1, 0.1])
    assert gp.jitter >= 1e-8
    assert fit(GpHyper(), [(0.5, 0.5)] * 4, np.zeros(4)).jitter == 0.0
    mean, var = predict(gp, [(0.5, 0.5)])
    assert np.isfinite(mean).all() and var[0] >= -1e-9


def test_jitter_escalates_then_raises(monkeypatch):
    calls = []

    def failing(a):
        calls.append(float(a[0, 0]))
        raise np.linalg.LinAlgError("not PD")

    monkeypatch.setattr(np.linalg, "cholesky", failing)
    with pytest.raises(NumericalError):
        fit(GpHyper(noise_var=0.0), np.full((3, 2), 0.5), np.zeros(3))
    added = np.array(calls) - 1.0
    assert np.allclose(added, 10.0 ** np.arange(-8, -1), rtol=1e-6)


def test_points_outside_square_rejected():
    with pytest.raises(ValueError):
        add_observation(empty_gp(), (1.2, 0.5), 0.0)
    with pytest.raises(ValueError):
        predict(empty_gp(), [(0.5, -0.01)])


def test_hyper_validation():
    with pytest.raises(ValueError):
        GpHyper(lengthscale=0.0)
    with pytest.raises(ValueError):
        GpHyper(noise_var=-1e-9)


@given(st.integers(0, 2**32 - 1))
def test_probe_set_matches_predict(seed):
    rng = np.random.default_rng(seed)
    probes = rng.uniform(size=(40, 2))
    ps = ProbeSet.from_gp(empty_gp(), probes)
    for x in rng.uniform(size=(12, 2)):
        ps = ps.add(x, rng.uniform())
    mean, var = predict(ps.gp, probes)
    assert np.max(np.abs(ps.mean - mean)) < 1e-8
    assert np.max(np.abs(ps.var - np.maximum(var, 0))) < 1e-8
    pts = rng.uniform(size=(5, 2))
    _, full = predict(ps.gp, np.vstack([probes[:3], pts]), full_cov=True)
    assert np.max(np.abs(ps.cross_cov(np.arange(3), pts) - full[:3, 3:])) < 1e-8
    assert np.max(np.abs(ps.point_cov(pts) - full[3:, 3:])) < 1e-8
