"""Versioned, line-delimited episode storage.

A dataset is a pair of files: `<name>.ds` with one JSON object per episode and
`<name>.manifest` with counts and a SHA-256 of the `.ds` bytes.

Per episode line::

    {"meta": {...}, "summary": {...},
     "states": [{"cand": [[x, y, mean, var, edge, dist], ...],
                 "ctx": [remaining, mean_cur, var_cur, trace_ratio],
                 "mask": "0110..."}, ...],          # T + 1 states
     "actions": [...], "rewards": [...], "dones": [...],
     "nodes": [[[x, y, mean, var], ...], ...]}      # optional, full-state mode

State t + 1 doubles as the next state of transition t.  Floats are written
with Python's shortest round-trip repr, so reads reproduce them bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .transitions import N_FEATURES, Transition
from .errors import ChecksumError, ConfigurationError
from .nn import Batch

FORMAT_VERSION = "offripp-ds/1"
CAND_COLS = 6
_CHUNK = 1 << 20


@dataclass
class EpisodeRecord:
    meta: dict
    steps: list  # of episode.Transition
    summary: dict

    @classmethod
    def from_rollout(cls, ro, meta: dict) -> "EpisodeRecord":
        meta = dict(meta)
        meta.setdefault("start", int(ro.initial.current))
        meta.setdefault("dest", int(ro.initial.dest))
        meta.setdefault("budget", float(ro.initial.budget))
        meta["format_version"] = FORMAT_VERSION
        summary = {
            "final_trace": float(ro.final.trace_now),
            "path_length": float(ro.final.traveled),
            "step_count": int(ro.final.step_count),
        }
        return cls(meta, list(ro.transitions), summary)


@dataclass
class DatasetManifest:
    episodes: int
    transitions: int
    planner_mix: dict
    checksum: str
    version: str = FORMAT_VERSION
    max_candidates: int = 0
    full_state: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class RecordError(ConfigurationError):
    pass


def ds_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".ds", ".manifest"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".ds"), p.with_name(p.name + ".manifest")


def validate_record(rec: EpisodeRecord, where: str = "") -> None:
    steps = rec.steps
    if not steps:
        raise RecordError(f"{where}episode has no steps")
    for t, tr in enumerate(steps):
        f = np.asarray(tr.state_features)
        m = np.asarray(tr.mask, dtype=bool)
        if f.ndim != 2 or f.shape[1] != N_FEATURES or len(m) != len(f):
            raise RecordError(f"{where}step {t}: bad feature/mask shape {f.shape}/{m.shape}")
        if not 0 <= tr.action < len(f) or not m[tr.action]:
            raise RecordError(f"{where}step {t}: action {tr.action} fails its mask")
        if not math.isfinite(tr.reward):
            raise RecordError(f"{where}step {t}: non-finite reward")
        if bool(tr.done) != (t == len(steps) - 1):
            raise RecordError(f"{where}step {t}: done flag must be set exactly at the last step")
        if not np.all(np.isfinite(f)):
            raise RecordError(f"{where}step {t}: non-finite features")
        if np.any(f[:, CAND_COLS:] != f[:1, CAND_COLS:]):
            raise RecordError(f"{where}step {t}: state-level feature columns differ across candidates")
        if t + 1 < len(steps):
            nxt = steps[t + 1]
            if not (np.array_equal(tr.next_features, nxt.state_features)
                    and np.array_equal(tr.next_mask, nxt.mask)):
                raise RecordError(f"{where}step {t}: next state differs from state of step {t + 1}")


def _encode_state(feats: np.ndarray, mask: np.ndarray) -> dict:
    return {
        "cand": feats[:, :CAND_COLS].tolist(),
        "ctx": feats[0, CAND_COLS:].tolist(),
        "mask": "".join("1" if b else "0" for b in mask),
    }


def _decode_state(d: dict):
    cand = np.array(d["cand"], dtype=float).reshape(-1, CAND_COLS)
    feats = np.empty((len(cand), N_FEATURES))
    feats[:, :CAND_COLS] = cand
    feats[:, CAND_COLS:] = np.array(d["ctx"], dtype=float)
    mask = np.frombuffer(d["mask"].encode(), dtype=np.uint8) == ord("1")
    return feats, mask


def encode_record(rec: EpisodeRecord) -> str:
    states = [_encode_state(np.asarray(s.state_features), np.asarray(s.mask)) for s in rec.steps]
    last = rec.steps[-1]
    states.append(_encode_state(np.asarray(last.next_features), np.asarray(last.next_mask)))
    obj = {
        "meta": rec.meta,
        "summary": rec.summary,
        "states": states,
        "actions": [int(s.action) for s in rec.steps],
        "rewards": [float(s.reward) for s in rec.steps],
        "dones": [bool(s.done) for s in rec.steps],
    }
    if rec.steps[0].nodes is not None:
        obj["nodes"] = [np.asarray(s.nodes).tolist() for s in rec.steps]
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def decode_record(line: str) -> EpisodeRecord:
    obj = json.loads(line)
    decoded = [_decode_state(s) for s in obj["states"]]
    nodes = obj.get("nodes")
    n = len(obj["actions"])
    if len(decoded) != n + 1 or len(obj["rewards"]) != n or len(obj["dones"]) != n:
        raise RecordError("inconsistent step counts")
    steps = [
        Transition(decoded[t][0], decoded[t][1], int(obj["actions"][t]), float(obj["rewards"][t]),
                   decoded[t + 1][0], decoded[t + 1][1], bool(obj["dones"][t]),
                   None if nodes is None else np.array(nodes[t], dtype=float))
        for t in range(n)
    ]
    return EpisodeRecord(obj["meta"], steps, obj["summary"])


def write_dataset(records: Iterable[EpisodeRecord], path) -> DatasetManifest:
    """Validate and write records atomically; returns the manifest."""
    ds_path, man_path = ds_paths(path)
    ds_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = ds_path.with_name(ds_path.name + ".tmp")
    digest = hashlib.sha256()
    n_ep = n_tr = max_c = 0
    mix: Counter = Counter()
    full = False
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for i, rec in enumerate(records):
                validate_record(rec, where=f"record {i}: ")
                line = encode_record(rec) + "\n"
                fh.write(line)
                digest.update(line.encode("utf-8"))
                n_ep += 1
                n_tr += len(rec.steps)
                max_c = max(max_c, max(len(s.mask) for s in rec.steps), len(rec.steps[-1].next_mask))
                mix[rec.meta.get("planner", {}).get("name", "unknown")] += 1
                full = full or rec.steps[0].nodes is not None
        os.replace(tmp, ds_path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    man = DatasetManifest(n_ep, n_tr, dict(sorted(mix.items())), digest.hexdigest(),
                          FORMAT_VERSION, max_c, full)
    mtmp = man_path.with_name(man_path.name + ".tmp")
    mtmp.write_text(json.dumps(man.to_dict(), indent=1, sort_keys=True) + "\n")
    os.replace(mtmp, man_path)
    return man


def read_manifest(path) -> DatasetManifest:
    _, man_path = ds_paths(path)
    if not man_path.exists():
        raise ConfigurationError(f"{man_path}: manifest not found")
    d = json.loads(man_path.read_text())
    if d.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"{man_path}: unknown schema version {d.get('version')!r}")
    return DatasetManifest(**d)


def verify_checksum(path) -> DatasetManifest:
    ds_path, _ = ds_paths(path)
    man = read_manifest(path)
    if not ds_path.exists():
        raise ConfigurationError(f"{ds_path}: dataset file not found")
    digest = hashlib.sha256()
    with open(ds_path, "rb") as fh:
        while chunk := fh.read(_CHUNK):
            digest.update(chunk)
    if digest.hexdigest() != man.checksum:
        raise ChecksumError(f"{ds_path}: checksum mismatch (file corrupted or truncated)")
    return man


def iter_dataset(path, verify: bool = True) -> Iterator[EpisodeRecord]:
    """Stream validated records one line at a time."""
    if verify:
        verify_checksum(path)
    ds_path, _ = ds_paths(path)
    with open(ds_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            where = f"{ds_path}:{lineno}: "
            try:
                rec = decode_record(line)
            except (ValueError, KeyError, TypeError) as exc:
                raise RecordError(f"{where}{exc}") from exc
            if rec.meta.get("format_version") != FORMAT_VERSION:
                raise RecordError(f"{where}unknown schema version {rec.meta.get('format_version')!r}")
            validate_record(rec, where=where)
            yield rec


def read_dataset(path):
    """Returns (records, manifest) after full validation."""
    man = verify_checksum(path)
    records = list(iter_dataset(path, verify=False))
    if len(records) != man.episodes or sum(len(r.steps) for r in records) != man.transitions:
        raise ConfigurationError(f"{path}: record counts disagree with manifest")
    return records, man


def merge_datasets(paths, out) -> DatasetManifest:
    """Concatenate shard datasets in the given order."""
    def gen():
        for p in paths:
            yield from iter_dataset(p)
    return write_dataset(gen(), out)


# ---------------------------------------------------------------- statistics


def _rank_entropy(records) -> float:
    """Entropy (nats) of the chosen action's variance rank among unmasked candidates."""
    counts: Counter = Counter()
    for rec in records:
        for s in rec.steps:
            f = np.asarray(s.state_features)
            unmasked = np.flatnonzero(s.mask)
            order = unmasked[np.argsort(-f[unmasked, 3], kind="stable")]
            counts[int(np.flatnonzero(order == s.action)[0])] += 1
    total = sum(counts.values())
    if total == 0:
        return 0.0
    p = np.array(list(counts.values()), dtype=float) / total
    return float(-np.sum(p * np.log(p)))


def _summ(xs) -> dict:
    xs = np.asarray(xs, dtype=float)
    if len(xs) == 0:
        return {"mean": float("nan"), "std": float("nan")}
    return {"mean": float(xs.mean()), "std": float(xs.std())}


def dataset_stats(source) -> list[dict]:
    """Summary rows: overall plus one per budget (rounded to 0.5)."""
    records = list(iter_dataset(source)) if isinstance(source, (str, Path)) else list(source)
    groups: dict = {"all": records}
    for r in records:
        key = f"{round(2 * float(r.meta['budget'])) / 2:g}"
        groups.setdefault(key, []).append(r)
    rows = []
    for key in ["all"] + sorted(k for k in groups if k != "all"):
        recs = groups[key]
        ft = _summ([r.summary["final_trace"] for r in recs])
        pl = _summ([r.summary["path_length"] for r in recs])
        rows.append({
            "budget": key,
            "episodes": len(recs),
            "final_trace_mean": ft["mean"],
            "final_trace_std": ft["std"],
            "path_length_mean": pl["mean"],
            "path_length_std": pl["std"],
            "mean_steps": _summ([r.summary["step_count"] for r in recs])["mean"],
            "action_rank_entropy": _rank_entropy(recs),
        })
    return rows


# ---------------------------------------------------------------- training tables


@dataclass
class TransitionTable:
    """All states padded to a common candidate count, plus transition indices."""

    feats: np.ndarray  # (S, C, F)
    mask: np.ndarray  # (S, C)
    state_idx: np.ndarray
    next_idx: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    episode_bounds: list = field(default_factory=list)

    def __len__(self):
        return len(self.action)

    def batch(self, idx) -> Batch:
        s, ns = self.state_idx[idx], self.next_idx[idx]
        return Batch(self.feats[s], self.mask[s], self.action[idx], self.reward[idx],
                     self.done[idx], self.feats[ns], self.mask[ns])

    def subset_episodes(self, episodes) -> "TransitionTable":
        """Table restricted to the given episode indices (states re-used, not copied)."""
        sel = np.concatenate([np.arange(*self.episode_bounds[e]) for e in episodes]) if len(episodes) else np.zeros(0, int)
        bounds, off = [], 0
        for e in episodes:
            n = self.episode_bounds[e][1] - self.episode_bounds[e][0]
            bounds.append((off, off + n))
            off += n
        return TransitionTable(self.feats, self.mask, self.state_idx[sel], self.next_idx[sel],
                               self.action[sel], self.reward[sel], self.done[sel], bounds)


def table_from_records(records) -> TransitionTable:
    records = list(records)
    max_c = max((max(max(len(s.mask) for s in r.steps), len(r.steps[-1].next_mask)) for r in records),
                default=1)
    return _build_table(iter(records), sum(len(r.steps) for r in records), max_c, len(records))


def _build_table(records, n_trans: int, max_c: int, n_ep: int) -> TransitionTable:
    n_states = n_trans + n_ep
    feats = np.zeros((n_states, max_c, N_FEATURES))
    mask = np.zeros((n_states, max_c), dtype=bool)
    state_idx = np.zeros(n_trans, dtype=np.int64)
    action = np.zeros(n_trans, dtype=np.int64)
    reward = np.zeros(n_trans)
    done = np.zeros(n_trans, dtype=bool)
    bounds = []
    si = ti = 0
    for rec in records:
        t0 = ti
        for tr in rec.steps:
            c = len(tr.mask)
            feats[si, :c] = tr.state_features
            mask[si, :c] = tr.mask
            state_idx[ti], action[ti], reward[ti], done[ti] = si, tr.action, tr.reward, tr.done
            si += 1
            ti += 1
        last = rec.steps[-1]
        c = len(last.next_mask)
        feats[si, :c] = last.next_features
        mask[si, :c] = last.next_mask
        si += 1
        bounds.append((t0, ti))
    return TransitionTable(feats, mask, state_idx, state_idx + 1, action, reward, done, bounds)


def load_table(path) -> TransitionTable:
    """Stream a dataset file into a padded training table."""
    man = verify_checksum(path)
    return _build_table(iter_dataset(path, verify=False), man.transitions,
                        max(man.max_candidates, 1), man.episodes)
