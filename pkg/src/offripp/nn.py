"""Shared-trunk candidate scorer with a behavior-policy head and a Q head.

Everything is plain numpy with hand-written backward passes.  Parameters live
in a single flat float64 vector; the per-layer arrays are views into it, so
optimizer updates, target-network copies and checksums all operate on `flat`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigurationError, ContractViolation, NumericalError

CKPT_MAGIC = b"OFFRIPP-CKPT\n"
CKPT_VERSION = 1


class ParamSet:
    """Weights W1 (F,H), b1, W2 (H,H), b2, policy head wp (H,), bp, Q head wq (H,), bq."""

    def __init__(self, n_features: int = 10, hidden: int = 64, flat=None):
        self.n_features = n_features
        self.hidden = hidden
        shapes = self.shapes()
        n = sum(int(np.prod(s)) for _, s in shapes)
        if flat is None:
            flat = np.zeros(n)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ConfigurationError(f"expected {n} parameters, got {flat.shape}")
        self.flat = flat
        self._bind()

    def shapes(self):
        f, h = self.n_features, self.hidden
        return [("W1", (f, h)), ("b1", (h,)), ("W2", (h, h)), ("b2", (h,)),
                ("wp", (h,)), ("bp", ()), ("wq", (h,)), ("bq", ())]

    def _bind(self):
        off = 0
        for name, shape in self.shapes():
            size = int(np.prod(shape))
            setattr(self, name, self.flat[off:off + size].reshape(shape))
            off += size

    @property
    def size(self) -> int:
        return len(self.flat)

    def copy(self) -> "ParamSet":
        return ParamSet(self.n_features, self.hidden, self.flat.copy())

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.n_features, self.hidden)

    def checksum(self) -> int:
        return checksum64(self.flat)

    def __repr__(self):
        return f"ParamSet(F={self.n_features}, H={self.hidden}, checksum={self.checksum():016x})"


def checksum64(arr: np.ndarray) -> int:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def init_params(seed: int, n_features: int = 10, hidden: int = 64, zero_heads: bool = False) -> ParamSet:
    rng = np.random.default_rng(seed)
    p = ParamSet(n_features, hidden)
    for name, fan_in in (("W1", n_features), ("W2", hidden), ("wp", hidden), ("wq", hidden)):
        if zero_heads and name in ("wp", "wq"):
            continue
        w = getattr(p, name)
        bound = 1.0 / np.sqrt(fan_in)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return p


# ---------------------------------------------------------------- forward


def encode(params: ParamSet, x: np.ndarray):
    """Trunk forward pass on (..., F) features; returns (h1, h2)."""
    h1 = np.tanh(x @ params.W1 + params.b1)
    h2 = np.tanh(h1 @ params.W2 + params.b2)
    return h1, h2


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward_batch(params: ParamSet, feats: np.ndarray, mask: np.ndarray):
    """Padded batch (B, C, F) + (B, C) mask -> (probs, q, cache)."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ContractViolation("every state needs at least one unmasked candidate")
    h1, h2 = encode(params, feats)
    logits = h2 @ params.wp + params.bp
    q = h2 @ params.wq + params.bq
    return masked_softmax(logits, mask), q, (h1, h2)


def forward_heads(params: ParamSet, features: np.ndarray, mask: np.ndarray):
    """Behavior probabilities and Q values for one state's (C, F) candidates."""
    probs, q, _ = forward_batch(params, np.asarray(features)[None], np.asarray(mask)[None])
    return probs[0], q[0]


def _backprop_trunk(params: ParamSet, grads: ParamSet, x, h1, h2, dh2):
    """Accumulate trunk gradients given dL/dh2; leading dims of x are flattened."""
    f, h = params.n_features, params.hidden
    x = x.reshape(-1, f)
    h1 = h1.reshape(-1, h)
    h2 = h2.reshape(-1, h)
    dz2 = dh2.reshape(-1, h) * (1.0 - h2 * h2)
    grads.W2 += h1.T @ dz2
    grads.b2 += dz2.sum(axis=0)
    dz1 = (dz2 @ params.W2.T) * (1.0 - h1 * h1)
    grads.W1 += x.T @ dz1
    grads.b1 += dz1.sum(axis=0)


# ---------------------------------------------------------------- losses


@dataclass
class Batch:
    """Padded minibatch of logged decisions.

    feats (B, C, F), mask (B, C), action (B,), and for TD: reward, done,
    next_feats (B, C', F), next_mask (B, C').
    """

    feats: np.ndarray
    mask: np.ndarray
    action: np.ndarray
    reward: np.ndarray = None
    done: np.ndarray = None
    next_feats: np.ndarray = None
    next_mask: np.ndarray = None

    def __len__(self):
        return len(self.action)


def nll_loss_grad(params: ParamSet, batch: Batch):
    """Mean negative log-likelihood of logged actions under the behavior head."""
    b = len(batch)
    rows = np.arange(b)
    if not np.all(batch.mask[rows, batch.action]):
        raise ContractViolation("logged action is masked")
    probs, _, (h1, h2) = forward_batch(params, batch.feats, batch.mask)
    p_a = probs[rows, batch.action]
    loss = float(-np.mean(np.log(p_a)))
    dlogits = probs.copy()
    dlogits[rows, batch.action] -= 1.0
    dlogits /= b
    grads = params.zeros_like()
    grads.wp += np.einsum("bc,bch->h", dlogits, h2)
    grads.bp += dlogits.sum()
    dh2 = dlogits[..., None] * params.wp
    _backprop_trunk(params, grads, batch.feats, h1, h2, dh2)
    return loss, grads


def admissible(probs: np.ndarray, mask: np.ndarray, tau: float) -> np.ndarray:
    """Unmasked candidates whose behavior probability is >= tau * max probability."""
    p = np.where(mask, probs, 0.0)
    return mask & (p >= tau * p.max(axis=-1, keepdims=True))


def td_targets(params: ParamSet, target_params: ParamSet, batch: Batch, gamma: float, tau: float):
    """r + gamma * max over admissible next candidates of the target Q (r on done)."""
    y = np.asarray(batch.reward, dtype=float).copy()
    live = ~np.asarray(batch.done, dtype=bool)
    if live.any():
        nf, nm = batch.next_feats[live], batch.next_mask[live]
        probs, _, _ = forward_batch(params, nf, nm)
        _, h2 = encode(target_params, nf)
        q_next = h2 @ target_params.wq + target_params.bq
        adm = admissible(probs, nm, tau)
        y[live] += gamma * np.max(np.where(adm, q_next, -np.inf), axis=-1)
    return y


def q_regression_loss_grad(params: ParamSet, batch: Batch, targets: np.ndarray):
    """Mean squared error of Q(s, a) against fixed targets, with gradients."""
    b = len(batch)
    x = batch.feats[np.arange(b), batch.action]  # (B, F)
    h1, h2 = encode(params, x)
    q = h2 @ params.wq + params.bq
    err = q - targets
    loss = float(np.mean(err * err))
    dq = 2.0 * err / b
    grads = params.zeros_like()
    grads.wq += h2.T @ dq
    grads.bq += dq.sum()
    _backprop_trunk(params, grads, x, h1, h2, np.outer(dq, params.wq))
    return loss, grads, q


def td_loss_grad(params: ParamSet, target_params: ParamSet, batch: Batch, gamma: float, tau: float):
    """Batch-constrained TD loss; targets are constants w.r.t. `params`.

    Returns (loss, grads, q_sa).
    """
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    y = td_targets(params, target_params, batch, gamma, tau)
    return q_regression_loss_grad(params, batch, y)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 1e-3) -> "AdamState":
        return cls(np.zeros(params.size), np.zeros(params.size), lr)


def adam_step(params: ParamSet, grads: ParamSet, opt: AdamState) -> None:
    """In-place bias-corrected Adam update of `params` and `opt`."""
    g = grads.flat
    if g.shape != params.flat.shape:
        raise ConfigurationError("gradient/parameter shape mismatch")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise NumericalError(f"non-finite gradient at {len(bad)} coordinates (first: {bad[:5].tolist()})")
    opt.step += 1
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * g
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * g * g
    m_hat = opt.m / (1.0 - opt.beta1**opt.step)
    v_hat = opt.v / (1.0 - opt.beta2**opt.step)
    params.flat -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


# ---------------------------------------------------------------- gradient check


def grad_check(params: ParamSet, loss_grad, n_coords: int = 200, h: float = 1e-5,
               seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_grad(params) -> (loss, grads, ...)`.  Checks all coordinates when the
    parameter count is at most `n_coords`, otherwise a random subset.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    out = loss_grad(params)
    analytic = out[1].flat
    rng = np.random.default_rng(seed)
    if params.size <= n_coords:
        coords = np.arange(params.size)
    else:
        coords = rng.choice(params.size, size=n_coords, replace=False)
    p = params.copy()
    worst = 0.0
    for i in coords:
        orig = p.flat[i]
        p.flat[i] = orig + h
        lp = loss_grad(p)[0]
        p.flat[i] = orig - h
        lm = loss_grad(p)[0]
        p.flat[i] = orig
        num = (lp - lm) / (2.0 * h)
        a = analytic[i]
        rel = abs(a - num) / max(abs(a), abs(num), floor)
        if not np.isfinite(rel):
            return float("inf")
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ParamSet, header: dict | None = None) -> int:
    """Write header + little-endian float64 parameters + 64-bit checksum."""
    head = {
        "format_version": CKPT_VERSION,
        "n_features": params.n_features,
        "hidden": params.hidden,
        "n_params": params.size,
    }
    head.update(header or {})
    blob = np.ascontiguousarray(params.flat, dtype="<f8").tobytes()
    csum = params.checksum()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        fh.write(blob)
        fh.write(struct.pack("<Q", csum))
    tmp.replace(path)
    return csum


def load_checkpoint(path):
    """Returns (params, header); raises ChecksumError on corruption."""
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ChecksumError(f"{path}: not a checkpoint file")
    rest = data[len(CKPT_MAGIC):]
    nl = rest.index(b"\n")
    head = json.loads(rest[:nl])
    if head.get("format_version") != CKPT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {head.get('format_version')}")
    body = rest[nl + 1:]
    n = head["n_params"]
    if len(body) != 8 * n + 8:
        raise ChecksumError(f"{path}: truncated checkpoint")
    flat = np.frombuffer(body[: 8 * n], dtype="<f8").astype(np.float64)
    (stored,) = struct.unpack("<Q", body[8 * n:])
    params = ParamSet(head["n_features"], head["hidden"], flat)
    if params.checksum() != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    return params, head
