import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from offripp.errors import ChecksumError, ConfigurationError, ContractViolation, NumericalError
from offripp.nn import (AdamState, Batch, ParamSet, adam_step, admissible, forward_batch,
                        forward_heads, grad_check, init_params, load_checkpoint, masked_softmax,
                        nll_loss_grad, save_checkpoint, td_loss_grad, td_targets)


def straight_line_forward(p, feats, mask):
    """Per-candidate loop version of the network, used as an oracle."""
    logits, q = [], []
    for x in feats:
        h1 = [math.tanh(sum(x[i] * p.W1[i, j] for i in range(p.n_features)) + p.b1[j])
              for j in range(p.hidden)]
        h2 = [math.tanh(sum(h1[i] * p.W2[i, j] for i in range(p.hidden)) + p.b2[j])
              for j in range(p.hidden)]
        logits.append(sum(a * b for a, b in zip(h2, p.wp)) + float(p.bp))
        q.append(sum(a * b for a, b in zip(h2, p.wq)) + float(p.bq))
    top = max(l for l, m in zip(logits, mask) if m)
    e = [math.exp(l - top) if m else 0.0 for l, m in zip(logits, mask)]
    z = sum(e)
    return np.array([v / z for v in e]), np.array(q)


def random_params(seed, scale=0.3, f=10, h=64):
    rng = np.random.default_rng(seed)
    p = init_params(seed, f, h)
    p.flat += scale * rng.standard_normal(p.size)
    return p


def random_batch(seed, b=6, c=7, f=10):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(b, c, f))
    mask = rng.random((b, c)) < 0.7
    mask[:, 0] |= ~mask.any(axis=1)
    action = np.array([rng.choice(np.flatnonzero(m)) for m in mask])
    nfeats = rng.normal(size=(b, c, f))
    nmask = rng.random((b, c)) < 0.6
    nmask[:, 1] = True
    done = rng.random(b) < 0.3
    return Batch(feats, mask, action, rng.normal(size=b), done, nfeats, nmask)


def test_param_layout():
    p = ParamSet()
    assert p.size == 10 * 64 + 64 + 64 * 64 + 64 + 64 + 1 + 64 + 1
    p.W2[3, 4] = 2.5
    assert 2.5 in p.flat
    with pytest.raises(ConfigurationError):
        ParamSet(10, 64, np.zeros(5))


def test_init_bounds():
    p = init_params(0)
    assert np.abs(p.W1).max() <= 1 / math.sqrt(10)
    assert np.abs(p.W2).max() <= 1 / math.sqrt(64)
    assert np.all(p.b1 == 0) and np.all(p.b2 == 0) and p.bp == 0 and p.bq == 0
    assert init_params(0).checksum() == p.checksum() != init_params(1).checksum()


def test_zero_heads_give_uniform_policy():
    p = init_params(3, zero_heads=True)
    probs, _ = forward_heads(p, np.random.default_rng(0).normal(size=(4, 10)), np.ones(4, bool))
    assert probs.tolist() == [0.25] * 4


def test_single_unmasked_has_probability_one():
    p = random_params(1)
    mask = np.array([False, False, True, False])
    probs, _ = forward_heads(p, np.ones((4, 10)), mask)
    assert probs[2] == 1.0 and np.all(probs[~mask] == 0.0)


@given(st.integers(0, 2**32 - 1))
def test_forward_matches_straight_line(seed):
    p = random_params(seed, h=8)
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(5, 10))
    mask = rng.random(5) < 0.6
    mask[rng.integers(5)] = True
    probs, q = forward_heads(p, feats, mask)
    op, oq = straight_line_forward(p, feats, mask)
    assert abs(probs.sum() - 1.0) < 1e-12
    assert np.all(probs[~mask] == 0.0)
    assert np.max(np.abs(probs - op)) < 1e-12
    assert np.max(np.abs(q - oq)) < 1e-12


def test_forward_is_pure():
    p = random_params(2)
    b = random_batch(2)
    a1, q1, _ = forward_batch(p, b.feats, b.mask)
    a2, q2, _ = forward_batch(p, b.feats, b.mask)
    assert a1.tobytes() == a2.tobytes() and q1.tobytes() == q2.tobytes()


def test_all_masked_rejected():
    with pytest.raises(ContractViolation):
        forward_heads(random_params(0), np.zeros((3, 10)), np.zeros(3, bool))


def test_masked_softmax_handles_large_logits():
    p = masked_softmax(np.array([[1e4, 1e4 - 1, -1e4]]), np.array([[True, True, False]]))
    assert np.isfinite(p).all() and p[0, 2] == 0.0


def test_nll_closed_forms():
    p = init_params(0, zero_heads=True)
    feats = np.random.default_rng(0).normal(size=(3, 4, 10))
    b = Batch(feats, np.ones((3, 4), bool), np.array([0, 1, 3]))
    loss, _ = nll_loss_grad(p, b)
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    single = np.zeros((3, 4), bool)
    single[np.arange(3), [0, 1, 3]] = True
    loss, grads = nll_loss_grad(random_params(4), Batch(feats, single, np.array([0, 1, 3])))
    assert loss == 0.0
    assert np.all(grads.flat == 0.0)


def test_nll_rejects_masked_action():
    b = random_batch(0)
    b.mask[0] = True
    b.mask[0, b.action[0]] = False
    with pytest.raises(ContractViolation):
        nll_loss_grad(random_params(0), b)


@pytest.mark.parametrize("seed", range(5))
def test_nll_gradient(seed):
    b = random_batch(seed)
    err = grad_check(random_params(seed), lambda q: nll_loss_grad(q, b), n_coords=300, seed=seed)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_td_gradient(seed):
    b = random_batch(seed)
    target = random_params(seed + 100)
    err = grad_check(random_params(seed), lambda q: td_loss_grad(q, target, b, 0.99, 0.3),
                     n_coords=300, seed=seed)
    assert err < 1e-4


def test_td_done_cases():
    p = init_params(0, zero_heads=True)
    p.bq[...] = 0.3
    feats = np.zeros((1, 2, 10))
    mask = np.ones((1, 2), bool)
    b = Batch(feats, mask, np.array([1]), np.array([0.3]), np.array([True]), feats, mask)
    assert td_loss_grad(p, p, b, 0.99, 0.3)[0] == 0.0
    p.bq[...] = 0.0
    b.reward[:] = 1.0
    assert td_loss_grad(p, p, b, 0.99, 0.3)[0] == 1.0


def test_td_hand_batch():
    p, target = random_params(11, h=6), random_params(12, h=6)
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(3, 3, 10))
    nfeats = rng.normal(size=(3, 3, 10))
    mask = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], bool)
    nmask = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 0]], bool)
    b = Batch(feats, mask, np.array([1, 2, 2]), np.array([0.2, -0.5, 0.1]),
              np.array([False, True, False]), nfeats, nmask)
    gamma, tau = 0.9, 0.5
    total = 0.0
    for i in range(3):
        _, q_now = straight_line_forward(p, feats[i], mask[i])
        y = b.reward[i]
        if not b.done[i]:
            probs, _ = straight_line_forward(p, nfeats[i], nmask[i])
            _, q_next = straight_line_forward(target, nfeats[i], nmask[i])
            ok = [j for j in range(3) if nmask[i, j] and probs[j] >= tau * probs.max()]
            y += gamma * max(q_next[j] for j in ok)
        total += (y - q_now[b.action[i]]) ** 2
    loss, _, _ = td_loss_grad(p, target, b, gamma, tau)
    assert loss == pytest.approx(total / 3, abs=1e-10)
    assert grad_check(p, lambda q: td_loss_grad(q, target, b, gamma, tau), n_coords=10_000) < 1e-4


def test_td_targets_use_constrained_max():
    p = init_params(0, zero_heads=True)
    target = init_params(0, zero_heads=True)
    # behavior prefers candidate 0 strongly; target Q prefers candidate 1
    p.wp[:] = 0
    feats = np.zeros((1, 2, 10))
    nf = np.zeros((1, 2, 10))
    nf[0, 0, 0], nf[0, 1, 0] = 5.0, -5.0
    p.bp[...] = 0
    p.W1[0, :] = 1.0
    p.W2[...] = np.eye(64)
    p.wp[:] = 1.0
    target.flat[:] = p.flat
    target.wq[:] = -1.0
    b = Batch(feats, np.ones((1, 2), bool), np.array([0]), np.array([0.0]), np.array([False]),
              nf, np.ones((1, 2), bool))
    probs, _ = forward_heads(p, nf[0], np.ones(2, bool))
    _, qn = forward_heads(target, nf[0], np.ones(2, bool))
    assert probs[0] > 0.99 and qn[1] > qn[0]
    assert td_targets(p, target, b, 1.0, 0.5)[0] == pytest.approx(qn[0])
    assert td_targets(p, target, b, 1.0, 0.0)[0] == pytest.approx(qn[1])


def test_admissible_relative_threshold():
    probs = np.array([0.5, 0.3, 0.2])
    assert admissible(probs, np.ones(3, bool), 0.5).tolist() == [True, True, False]
    assert admissible(probs, np.ones(3, bool), 1.0).tolist() == [True, False, False]
    assert admissible(probs, np.array([False, True, True]), 0.0).tolist() == [False, True, True]


def test_adam_first_step():
    p = ParamSet(1, 1)
    g = p.zeros_like()
    g.flat[0] = 1.0
    opt = AdamState.for_params(p, lr=1e-3)
    adam_step(p, g, opt)
    assert p.flat[0] == pytest.approx(-1e-3, rel=1e-6)
    assert np.all(p.flat[1:] == 0) and opt.step == 1


def test_adam_zero_gradient_is_noop():
    p = random_params(0)
    before = p.flat.copy()
    adam_step(p, p.zeros_like(), AdamState.for_params(p))
    assert np.array_equal(before, p.flat)


def test_adam_quadratic_descent():
    p = ParamSet(2, 2)
    p.flat[:] = np.linspace(-1, 1, p.size)
    opt = AdamState.for_params(p, lr=0.05)
    vals = [float(p.flat @ p.flat)]
    for _ in range(5):
        g = p.zeros_like()
        g.flat[:] = 2 * p.flat
        adam_step(p, g, opt)
        vals.append(float(p.flat @ p.flat))
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_adam_rejects_non_finite():
    p = ParamSet(2, 2)
    g = p.zeros_like()
    g.flat[3] = np.nan
    with pytest.raises(NumericalError, match="non-finite"):
        adam_step(p, g, AdamState.for_params(p))


def test_grad_check_linear_model():
    rng = np.random.default_rng(0)
    p = ParamSet(2, 2)
    p.flat[:] = rng.normal(size=p.size)
    A, y = rng.normal(size=(30, p.size)), rng.normal(size=30)

    def loss_grad(q):
        r = A @ q.flat - y
        g = q.zeros_like()
        g.flat[:] = 2 * A.T @ r / len(y)
        return float(r @ r / len(y)), g

    assert grad_check(p, loss_grad) < 1e-9


def test_checkpoint_roundtrip(tmp_path):
    p = random_params(9)
    path = tmp_path / "m.ckpt"
    csum = save_checkpoint(path, p, {"tau": 0.3, "role": "offripp"})
    q, head = load_checkpoint(path)
    assert q.flat.tobytes() == p.flat.tobytes()
    assert csum == p.checksum() == q.checksum()
    assert head["tau"] == 0.3 and head["n_features"] == 10 and head["hidden"] == 64
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, random_params(9))
    raw = bytearray(path.read_bytes())
    for pos in (len(raw) - 3, len(raw) - 100, len(raw) // 2):
        bad = bytearray(raw)
        bad[pos] ^= 0x10
        path.write_bytes(bytes(bad))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)
    path.write_bytes(bytes(raw[:-9]))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
