"""Simulator-based evaluation, method grids and hyperparameter sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig, dump_config
from .dataset import Dataset, annotate_nsr, generate
from .env import EntranceProfile, featurize, reset, step
from .trainer import METHODS, Pretrained, derive_seed, pretrain, run_algorithm1

log = logging.getLogger(__name__)

# baseline, naive transfer, full method, three ablations
DEFAULT_METHODS = ("no_transfer", "all_transfer", "shtaa", "no_ua_sim", "no_ac", "no_loss_tl")
BASELINE = "no_transfer"
EVAL_STREAM = 1000


class FixedPolicy:
    """Always plays one action index; handy for sanity checks."""

    def __init__(self, index: int):
        self.index = index

    def greedy(self, state_feat: np.ndarray) -> np.ndarray:
        return np.full(len(state_feat), self.index, dtype=np.int64)


def evaluate(
    agent,
    profile: EntranceProfile,
    n_episodes: int,
    seed: int,
    expected: bool = False,
    L: Optional[int] = None,
) -> Tuple[float, float]:
    """Greedy rollouts; returns per-episode means of summed r_ad and r_fee.

    Episode ``i`` uses generator ``(seed, i)``, so two policies evaluated
    with the same seed face the same users, queues and random draws.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rngs = [np.random.default_rng([seed, i]) for i in range(n_episodes)]
    states = [reset(profile, rng) for rng in rngs]
    r_ad = np.zeros(n_episodes)
    r_fee = np.zeros(n_episodes)
    alive = list(range(n_episodes))
    while alive:
        feats = np.array([featurize(states[i], profile, L) for i in alive])
        actions = agent.greedy(feats)
        still = []
        for i, a in zip(alive, actions):
            out = step(profile, states[i], int(a), rngs[i], expected=expected)
            r_ad[i] += out.r_ad
            r_fee[i] += out.r_fee
            if not out.terminal:
                states[i] = out.next_state
                still.append(i)
        alive = still
    return float(r_ad.mean()), float(r_fee.mean())


def dataset_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for col in ("episode_id", "t", "state_feat", "action_index", "r", "r_ad", "r_fee",
                "next_state_feat", "terminal", "r_N"):
        h.update(np.ascontiguousarray(getattr(dataset, col)).tobytes())
    return h.hexdigest()[:16]


def make_datasets(cfg: ExperimentConfig, seed: int) -> Tuple[Dataset, Dataset]:
    """NSR-annotated source and target datasets for one experiment seed."""
    tcfg = cfg.transfer
    D_S = generate(cfg.source_profile, None, cfg.n_source, derive_seed(seed, 101), L=cfg.feature_L)
    D_T = generate(cfg.target_profile, None, cfg.n_target, derive_seed(seed, 102), L=cfg.feature_L)
    return annotate_nsr(D_S, tcfg.N, tcfg.gamma), annotate_nsr(D_T, tcfg.N, tcfg.gamma)


def _relative(x: float, base: float) -> float:
    return (x - base) / base if base != 0 else float("nan")


@dataclass
class ExperimentReport:
    method: str
    seeds: List[int]
    R_ad: List[float] = field(default_factory=list)
    R_fee: List[float] = field(default_factory=list)
    dataset_hashes: List[str] = field(default_factory=list)
    status: str = "ok"
    error: str = ""
    config: str = ""
    baseline: str = BASELINE
    improvement_ad: float = float("nan")
    improvement_fee: float = float("nan")
    label: str = ""

    @staticmethod
    def _std(x) -> float:
        return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0

    @property
    def R_ad_mean(self) -> float:
        return float(np.mean(self.R_ad)) if self.R_ad else float("nan")

    @property
    def R_fee_mean(self) -> float:
        return float(np.mean(self.R_fee)) if self.R_fee else float("nan")

    @property
    def R_ad_std(self) -> float:
        return self._std(self.R_ad)

    @property
    def R_fee_std(self) -> float:
        return self._std(self.R_fee)

    def set_improvement(self, base: "ExperimentReport") -> None:
        self.baseline = base.method
        self.improvement_ad = _relative(self.R_ad_mean, base.R_ad_mean)
        self.improvement_fee = _relative(self.R_fee_mean, base.R_fee_mean)

    def row(self) -> dict:
        return {
            "method": self.method,
            "label": self.label,
            "status": self.status,
            "n_seeds": len(self.R_ad),
            "R_ad_mean": repr(self.R_ad_mean),
            "R_ad_std": repr(self.R_ad_std),
            "R_fee_mean": repr(self.R_fee_mean),
            "R_fee_std": repr(self.R_fee_std),
            "baseline": self.baseline,
            "R_ad_improvement": repr(self.improvement_ad),
            "R_fee_improvement": repr(self.improvement_fee),
            "seeds": " ".join(map(str, self.seeds)),
            "R_ad_per_seed": " ".join(map(repr, self.R_ad)),
            "R_fee_per_seed": " ".join(map(repr, self.R_fee)),
            "dataset_hashes": " ".join(self.dataset_hashes),
            "error": self.error,
            "config": self.config,
        }


REPORT_COLUMNS = tuple(ExperimentReport("", []).row())


def reports_to_csv(reports: Iterable[ExperimentReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.row())
    return buf.getvalue()


class _SeedContext:
    """Datasets and lazily pre-trained artifacts shared by all cells of one seed."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.D_S, self.D_T = make_datasets(cfg, seed)
        self.hash = f"{dataset_hash(self.D_S)}/{dataset_hash(self.D_T)}"
        self._pre: Optional[Pretrained] = None

    def pretrained(self) -> Pretrained:
        if self._pre is None:
            tcfg = self.cfg.with_transfer(seed=self.seed).transfer
            self._pre = pretrain(self.D_S, self.D_T, self.cfg.n_actions, tcfg)
        return self._pre


def _context(cache: Optional[Dict[int, _SeedContext]], cfg: ExperimentConfig, seed: int) -> _SeedContext:
    if cache is None:
        return _SeedContext(cfg, seed)
    ctx = cache.get(seed)
    if ctx is None or dump_config(ctx.cfg.with_transfer(similarity=cfg.transfer.similarity)) != dump_config(cfg):
        ctx = cache[seed] = _SeedContext(cfg, seed)
    return ctx


def run_cell(ctx: _SeedContext, cfg: ExperimentConfig, method: str) -> Tuple[float, float]:
    tcfg = cfg.with_transfer(method=method, seed=ctx.seed).transfer
    pre = None if method in ("no_transfer", "all_transfer") else ctx.pretrained()
    result = run_algorithm1(ctx.D_S, ctx.D_T, tcfg, cfg.n_actions, pre)
    return evaluate(
        result.agent_T, cfg.target_profile, cfg.eval_episodes,
        derive_seed(ctx.seed, EVAL_STREAM), L=cfg.feature_L,
    )


def run_grid(
    methods: Sequence[str] = DEFAULT_METHODS,
    base_cfg: Optional[ExperimentConfig] = None,
    n_seeds: int = 5,
    seeds: Optional[Sequence[int]] = None,
    contexts: Optional[Dict[int, "_SeedContext"]] = None,
) -> List[ExperimentReport]:
    """Train and evaluate each method on identical per-seed datasets.

    ``contexts`` (seed -> datasets and pre-trained models) is filled on first
    use and reused afterwards, so a grid and a tau sweep over the same config
    share one pre-training per seed.
    """
    base_cfg = base_cfg or ExperimentConfig()
    base_cfg.validate()
    seeds = list(seeds) if seeds is not None else list(range(n_seeds))
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    reports = {m: ExperimentReport(m, seeds, config=dump_config(base_cfg.with_transfer(method=m))) for m in methods}
    for seed in seeds:
        ctx = _context(contexts, base_cfg, seed)
        for m in methods:
            rep = reports[m]
            if rep.status != "ok":
                continue
            try:
                r_ad, r_fee = run_cell(ctx, base_cfg, m)
            except Exception as exc:  # a failed cell marks the row, the grid continues
                log.exception("method %s failed on seed %d", m, seed)
                rep.status, rep.error = "failed", f"{type(exc).__name__}: {exc}"
                continue
            rep.R_ad.append(r_ad)
            rep.R_fee.append(r_fee)
            rep.dataset_hashes.append(ctx.hash)
            log.info("seed %d %-12s R_ad=%.4f R_fee=%.4f", seed, m, r_ad, r_fee)
    out = [reports[m] for m in methods]
    _attach_improvements(out)
    return out


def _attach_improvements(reports: List[ExperimentReport]) -> None:
    base = next((r for r in reports if r.method == BASELINE and r.status == "ok"), None)
    if base is None:
        return
    for rep in reports:
        if rep.status == "ok":
            rep.set_improvement(base)


SWEEP_PARAMS = ("N", "tau")


def sweep(
    param: str,
    values: Sequence[float],
    base_cfg: Optional[ExperimentConfig] = None,
    n_seeds: int = 5,
    seeds: Optional[Sequence[int]] = None,
    method: str = "shtaa",
    contexts: Optional[Dict[int, "_SeedContext"]] = None,
) -> List[ExperimentReport]:
    """One run of ``method`` per (value, seed); rows are labelled ``param=value``."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"param must be one of {SWEEP_PARAMS}")
    if not values:
        raise ValueError("values must be nonempty")
    base_cfg = base_cfg or ExperimentConfig()
    seeds = list(seeds) if seeds is not None else list(range(n_seeds))
    cfgs = []
    for v in values:
        if param == "tau":
            cfg = base_cfg.replace()
            cfg.transfer.similarity.tau = float(v)
        else:
            cfg = base_cfg.with_transfer(N=int(v))
        cfg.validate()
        cfgs.append(cfg)
    reports = [
        ExperimentReport(method, seeds, config=dump_config(c.with_transfer(method=method)), label=f"{param}={v}")
        for v, c in zip(values, cfgs)
    ]
    for seed in seeds:
        # tau only changes filtering, so one context (and pre-training) serves all values
        shared = _context(contexts, base_cfg, seed) if param == "tau" else None
        for cfg, rep in zip(cfgs, reports):
            if rep.status != "ok":
                continue
            ctx = shared or _SeedContext(cfg, seed)
            try:
                r_ad, r_fee = run_cell(ctx, cfg, method)
            except Exception as exc:
                log.exception("sweep %s failed on seed %d", rep.label, seed)
                rep.status, rep.error = "failed", f"{type(exc).__name__}: {exc}"
                continue
            rep.R_ad.append(r_ad)
            rep.R_fee.append(r_fee)
            rep.dataset_hashes.append(ctx.hash)
            log.info("seed %d %-10s R_ad=%.4f R_fee=%.4f", seed, rep.label, r_ad, r_fee)
    return reports
