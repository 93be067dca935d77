"""Offline transition datasets: generation, N-step returns and JSONL I/O.

Datasets are stored column-wise (numpy arrays) because the source entrance
easily holds a few hundred thousand transitions; :class:`Transition` is the
row view used for serialization and inspection.
"""

from __future__ import annotations

import gzip
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Union

import numpy as np

from .env import EntranceProfile, featurize, feature_dim, reset, step

SCHEMA = "adtransfer.transitions"
SCHEMA_VERSION = 1

# (state_feat, rng) -> action index
BehaviorPolicy = Callable[[np.ndarray, np.random.Generator], int]


class DatasetParseError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}: line {lineno}: {reason}")
        self.lineno = lineno


@dataclass
class Transition:
    entrance_id: str
    episode_id: int
    t: int
    state_feat: List[float]
    action_index: int
    r: float
    r_ad: float
    r_fee: float
    r_N: Optional[float]
    next_state_feat: Optional[List[float]]
    w: Optional[float] = None


FIELDS = tuple(Transition.__dataclass_fields__)


def _matrix(x, n: int, d: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x if x.ndim == 2 and (d < 0 or x.shape[1] == d) else x.reshape(n, d)


class Dataset:
    """Column store of transitions. ``r_N`` and ``w`` are NaN until annotated."""

    def __init__(
        self,
        entrance_id,
        episode_id,
        t,
        state_feat,
        action_index,
        r,
        r_ad,
        r_fee,
        next_state_feat,
        terminal,
        r_N=None,
        w=None,
    ):
        n = len(episode_id)
        self.entrance_id = np.asarray(entrance_id, dtype=object).reshape(n)
        self.episode_id = np.asarray(episode_id, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.int64)
        self.state_feat = _matrix(state_feat, n)
        self.action_index = np.asarray(action_index, dtype=np.int64)
        self.r = np.asarray(r, dtype=np.float64)
        self.r_ad = np.asarray(r_ad, dtype=np.float64)
        self.r_fee = np.asarray(r_fee, dtype=np.float64)
        self.next_state_feat = _matrix(next_state_feat, n, self.state_feat.shape[1])
        self.terminal = np.asarray(terminal, dtype=bool)
        self.r_N = np.full(n, np.nan) if r_N is None else np.asarray(r_N, dtype=np.float64)
        self.w = np.full(n, np.nan) if w is None else np.asarray(w, dtype=np.float64)

    _columns = (
        "entrance_id", "episode_id", "t", "state_feat", "action_index", "r", "r_ad",
        "r_fee", "next_state_feat", "terminal", "r_N", "w",
    )

    def __len__(self) -> int:
        return len(self.episode_id)

    @property
    def feat_dim(self) -> int:
        return self.state_feat.shape[1]

    @property
    def has_nsr(self) -> bool:
        return len(self) == 0 or not np.isnan(self.r_N).any()

    @property
    def has_weights(self) -> bool:
        return len(self) == 0 or not np.isnan(self.w).any()

    def copy(self, **overrides) -> "Dataset":
        cols = {c: getattr(self, c).copy() for c in self._columns}
        cols.update(overrides)
        return Dataset(**cols)

    def subset(self, index) -> "Dataset":
        return Dataset(**{c: getattr(self, c)[index] for c in self._columns})

    def episode_bounds(self) -> np.ndarray:
        """Start offsets of each episode plus a trailing ``len(self)``."""
        if len(self) == 0:
            return np.zeros(1, dtype=np.int64)
        change = (self.episode_id[1:] != self.episode_id[:-1]) | (
            self.entrance_id[1:] != self.entrance_id[:-1]
        )
        starts = np.concatenate([[0], np.flatnonzero(change) + 1, [len(self)]])
        return starts.astype(np.int64)

    def records(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield Transition(
                entrance_id=str(self.entrance_id[i]),
                episode_id=int(self.episode_id[i]),
                t=int(self.t[i]),
                state_feat=self.state_feat[i].tolist(),
                action_index=int(self.action_index[i]),
                r=float(self.r[i]),
                r_ad=float(self.r_ad[i]),
                r_fee=float(self.r_fee[i]),
                r_N=None if math.isnan(self.r_N[i]) else float(self.r_N[i]),
                next_state_feat=None if self.terminal[i] else self.next_state_feat[i].tolist(),
                w=None if math.isnan(self.w[i]) else float(self.w[i]),
            )

    @classmethod
    def from_records(cls, records: Sequence[Transition], feat_dim: int = 0) -> "Dataset":
        if records:
            feat_dim = len(records[0].state_feat)
        return cls(
            entrance_id=[rec.entrance_id for rec in records],
            episode_id=[rec.episode_id for rec in records],
            t=[rec.t for rec in records],
            state_feat=np.array([rec.state_feat for rec in records], dtype=np.float64).reshape(
                len(records), feat_dim
            ),
            action_index=[rec.action_index for rec in records],
            r=[rec.r for rec in records],
            r_ad=[rec.r_ad for rec in records],
            r_fee=[rec.r_fee for rec in records],
            r_N=[np.nan if rec.r_N is None else rec.r_N for rec in records],
            next_state_feat=np.array(
                [rec.next_state_feat or [0.0] * feat_dim for rec in records], dtype=np.float64
            ).reshape(len(records), feat_dim),
            terminal=[rec.next_state_feat is None for rec in records],
            w=[np.nan if rec.w is None else rec.w for rec in records],
        )

    def equals(self, other: "Dataset") -> bool:
        """Exact equality, treating NaN == NaN."""
        if len(self) != len(other) or self.feat_dim != other.feat_dim:
            return False
        for c in self._columns:
            a, b = getattr(self, c), getattr(other, c)
            if a.dtype.kind == "f":
                if not np.array_equal(a, b, equal_nan=True):
                    return False
            elif not np.array_equal(a, b):
                return False
        return True


def concat(datasets: Sequence[Dataset]) -> Dataset:
    datasets = [d for d in datasets if len(d)] or list(datasets[:1])
    return Dataset(
        **{
            c: np.concatenate([getattr(d, c) for d in datasets])
            for c in Dataset._columns
        }
    )


def uniform_policy(n_actions: int) -> BehaviorPolicy:
    def policy(state_feat, rng):
        return int(rng.integers(n_actions))

    return policy


def epsilon_greedy_policy(agent, epsilon: float) -> BehaviorPolicy:
    """Explore around a trained agent (see :meth:`QAgent.act`)."""

    def policy(state_feat, rng):
        return agent.act(state_feat, epsilon, rng).index

    return policy


def generate(
    profile: EntranceProfile,
    policy: Optional[BehaviorPolicy] = None,
    n_requests: int = 1,
    seed: int = 0,
    expected: bool = False,
    L: Optional[int] = None,
) -> Dataset:
    """Roll out ``n_requests`` episodes under ``policy`` (uniform by default).

    Each episode draws from its own generator seeded by ``(seed, episode)``.
    """
    if n_requests < 1:
        raise ValueError("n_requests must be >= 1")
    policy = policy or uniform_policy(profile.n_actions)
    d = feature_dim(profile.K, L)
    episode_id, ts, actions, rs, r_ads, r_fees, terminals = [], [], [], [], [], [], []
    feats, next_feats = [], []
    zeros = np.zeros(d)
    for ep in range(n_requests):
        rng = np.random.default_rng([seed, ep])
        state = reset(profile, rng)
        feat = featurize(state, profile, L)
        t = 0
        while True:
            a = policy(feat, rng)
            out = step(profile, state, a, rng, expected=expected)
            episode_id.append(ep)
            ts.append(t)
            actions.append(a)
            rs.append(out.r)
            r_ads.append(out.r_ad)
            r_fees.append(out.r_fee)
            terminals.append(out.terminal)
            feats.append(feat)
            if out.terminal:
                next_feats.append(zeros)
                break
            state = out.next_state
            feat = featurize(state, profile, L)
            next_feats.append(feat)
            t += 1
    n = len(episode_id)
    return Dataset(
        entrance_id=[profile.entrance_id] * n,
        episode_id=episode_id,
        t=ts,
        state_feat=np.array(feats),
        action_index=actions,
        r=rs,
        r_ad=r_ads,
        r_fee=r_fees,
        next_state_feat=np.array(next_feats),
        terminal=terminals,
    )


def annotate_nsr(dataset: Dataset, N: int, gamma: float) -> Dataset:
    """Attach truncated N-step returns ``sum_i gamma**i * r[t+i]``.

    Sums stop at the end of each episode. Episodes must be stored contiguously.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    r_N = np.zeros(len(dataset))
    bounds = dataset.episode_bounds()
    for start, stop in zip(bounds[:-1], bounds[1:]):
        rewards = dataset.r[start:stop]
        out = r_N[start:stop]
        length = stop - start
        for i in range(min(N, length)):
            out[: length - i] += gamma ** i * rewards[i:]
    return dataset.copy(r_N=r_N)


def _open(path: Path, mode: str):
    if path.suffix == ".gz":
        raw = open(path, mode + "b")
        # blank name and mtime=0 keep gzip output byte-stable
        if mode == "w":
            gz = gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0)
        else:
            gz = gzip.GzipFile(fileobj=raw)
        return _Closing(io.TextIOWrapper(gz, encoding="utf-8", newline="\n"), raw)
    return open(path, mode, encoding="utf-8", newline="\n")


class _Closing:
    def __init__(self, text, raw):
        self.text, self.raw = text, raw

    def __enter__(self):
        return self.text

    def __exit__(self, *exc):
        self.text.close()
        self.raw.close()


def save(dataset: Dataset, path: Union[str, Path]) -> None:
    """One JSON object per transition, preceded by a schema header line.

    An empty dataset is written as an empty file.
    """
    path = Path(path)
    with _open(path, "w") as fh:
        if len(dataset) == 0:
            return
        header = {"schema": SCHEMA, "version": SCHEMA_VERSION, "feat_dim": dataset.feat_dim}
        fh.write(json.dumps(header) + "\n")
        for rec in dataset.records():
            fh.write(json.dumps(rec.__dict__, allow_nan=False) + "\n")


def load(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    records = []
    feat_dim = 0
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetParseError(path, lineno, "expected a JSON object")
            if "schema" in obj:
                if obj["schema"] != SCHEMA or obj.get("version") != SCHEMA_VERSION:
                    raise DatasetParseError(path, lineno, f"unsupported schema {obj}")
                feat_dim = int(obj.get("feat_dim", 0))
                continue
            missing = [f for f in FIELDS if f not in obj]
            if missing:
                raise DatasetParseError(path, lineno, f"missing fields {missing}")
            records.append(Transition(**{f: obj[f] for f in FIELDS}))
    return Dataset.from_records(records, feat_dim)
