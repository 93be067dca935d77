"""Offline hybrid-transfer training of the target-entrance agent.

Pipeline: pre-train one NSR model per entrance and a source agent, weight
every sample by NSR similarity, drop dissimilar source samples, then train a
fresh target agent on the merged data with

    mean_B( w * (Q_S(s,a) - Q_T(s,a))^2 + (y_restricted - Q_T(s,a))^2 )

where ``y_restricted`` maximizes only over the source agent's top-beta
actions at s'.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
import torch

from .agent import AgentConfig, Batch, QAgent, train_dqn
from .dataset import Dataset, concat
from .env import ConfigError
from .nsr import NsrConfig, NsrModel, train_nsr
from .similarity import (
    SimilarityConfig,
    annotate_weights,
    beta_array,
    filter_source,
    mean_only_weights,
)

log = logging.getLogger(__name__)

METHODS = ("shtaa", "no_transfer", "all_transfer", "no_ua_sim", "no_ac", "no_loss_tl")
LOG_COLUMNS = ("iteration", "loss", "loss_rl", "loss_tl", "mean_w", "mean_beta")


def derive_seed(seed: int, stream: int) -> int:
    """Independent integer seed for one pipeline stage."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


@dataclass
class TransferConfig:
    method: str = "shtaa"
    N: int = 3
    gamma: float = 0.9
    iterations: int = 8000
    source_iterations: int = 8000
    batch_size: int = 256
    seed: int = 0
    log_every: int = 100
    # early stop once the windowed mean loss fails to improve by plateau_tol
    # (relative) for `patience` consecutive windows; 0 disables
    patience: int = 0
    plateau_tol: float = 1e-3
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    nsr: NsrConfig = field(default_factory=NsrConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    # test hook: overwrite every similarity weight with this constant
    force_weight: Optional[float] = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.N < 1 or not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("need N >= 1 and 0 <= gamma <= 1")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")


class HybridLoss(NamedTuple):
    total: torch.Tensor
    rl: torch.Tensor
    tl: torch.Tensor
    weighted_tl: torch.Tensor
    mean_beta: float


def top_beta_mask(q: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Row-wise mask of the ``beta`` highest entries (ties -> lower index first)."""
    order = torch.sort(q, dim=1, descending=True, stable=True).indices
    ranks = torch.empty_like(order)
    ranks.scatter_(1, order, torch.arange(q.shape[1]).expand_as(order).contiguous())
    return ranks < beta[:, None]


def hybrid_loss(
    agent_T: QAgent,
    agent_S: QAgent,
    batch: Batch,
    cfg: SimilarityConfig,
    use_ac: bool = True,
    use_tl: bool = True,
    rl_scale: Optional[torch.Tensor] = None,
) -> HybridLoss:
    """Gradients flow only into ``agent_T``'s online network."""
    if torch.isnan(batch.w).any():
        raise ValueError("batch contains transitions without similarity weights")
    n_actions = agent_T.n_actions
    with torch.no_grad():
        beta = torch.as_tensor(beta_array(batch.w.numpy(), n_actions, cfg))
        mask = None
        if use_ac:
            mask = top_beta_mask(agent_S.online(batch.next_state_feat), beta)
        target = agent_T.td_targets(batch.r, batch.next_state_feat, batch.terminal, mask)
        q_S = agent_S.online(batch.state_feat).gather(1, batch.action_index[:, None]).squeeze(1)
    q_T = agent_T.q_taken(batch)
    rl = (target - q_T) ** 2
    if rl_scale is not None:
        rl = rl_scale * rl
    tl = (q_S - q_T) ** 2
    weighted = batch.w * tl
    total = (weighted + rl).mean() if use_tl else rl.mean()
    mean_beta = float(beta.double().mean()) if use_ac else float(n_actions)
    return HybridLoss(total, rl.mean(), tl.mean(), weighted.mean(), mean_beta)


@dataclass
class Pretrained:
    nsr_S: Optional[NsrModel]
    nsr_T: Optional[NsrModel]
    agent_S: QAgent


@dataclass
class TrainResult:
    agent_T: QAgent
    log: List[dict]
    merged: Dataset
    pretrained: Optional[Pretrained] = None
    n_source_kept: int = 0


def _agent_cfg(cfg: TransferConfig, stream: int) -> AgentConfig:
    # the experiment-level gamma always wins over the agent section
    return AgentConfig(**{**cfg.agent.__dict__, "gamma": cfg.gamma, "seed": derive_seed(cfg.seed, stream)})


def pretrain_source_agent(D_S: Dataset, n_actions: int, cfg: TransferConfig) -> QAgent:
    agent_cfg = _agent_cfg(cfg, 3)
    agent_S = QAgent(D_S.feat_dim, n_actions, agent_cfg)
    train_dqn(agent_S, D_S, cfg.source_iterations, cfg.batch_size, derive_seed(cfg.seed, 13))
    return agent_S.freeze()


def pretrain_nsr(D: Dataset, n_actions: int, cfg: TransferConfig, stream: int) -> NsrModel:
    nsr_cfg = NsrConfig(**{**cfg.nsr.__dict__, "seed": derive_seed(cfg.seed, stream)})
    return train_nsr(D, n_actions, nsr_cfg)


def pretrain(D_S: Dataset, D_T: Dataset, n_actions: int, cfg: TransferConfig) -> Pretrained:
    """Pre-training stage: both NSR models and the frozen source agent."""
    for name, D in (("source", D_S), ("target", D_T)):
        if not D.has_nsr:
            raise ValueError(f"{name} dataset has no r_N annotation")
    return Pretrained(
        nsr_S=pretrain_nsr(D_S, n_actions, cfg, 1),
        nsr_T=pretrain_nsr(D_T, n_actions, cfg, 2),
        agent_S=pretrain_source_agent(D_S, n_actions, cfg),
    )


def similarity_weights(D: Dataset, pre: Pretrained, cfg: TransferConfig, scale: float) -> Dataset:
    if cfg.force_weight is not None:
        return D.copy(w=np.full(len(D), float(cfg.force_weight)))
    if cfg.method == "no_ua_sim":
        mu_S, _ = pre.nsr_S.predict_batch(D.state_feat, D.action_index)
        mu_T, _ = pre.nsr_T.predict_batch(D.state_feat, D.action_index)
        return D.copy(w=mean_only_weights(mu_S, mu_T, scale))
    return annotate_weights(D, pre.nsr_S, pre.nsr_T, cfg.similarity)


def _train_loop(agent_T: QAgent, data: Dataset, cfg: TransferConfig, step_fn) -> List[dict]:
    rng = np.random.default_rng([cfg.seed, 4])
    full = Batch.from_dataset(data, dtype=agent_T.dtype)
    n = len(data)
    bs = min(cfg.batch_size, n)
    rows: List[dict] = []
    window = []
    best = np.inf
    stale = 0
    for it in range(1, cfg.iterations + 1):
        idx = torch.as_tensor(rng.integers(n, size=bs))
        window.append(step_fn(Batch(*(col[idx] for col in full)), idx))
        if it % cfg.log_every == 0 or it == cfg.iterations:
            stats = np.mean(np.array(window), axis=0)
            rows.append(dict(zip(LOG_COLUMNS, [it, *stats.tolist()])))
            window = []
            if cfg.patience:
                if stats[0] < best * (1 - cfg.plateau_tol):
                    best, stale = stats[0], 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        log.info("plateau early stop at iteration %d", it)
                        break
    return rows


def train_target_dqn(D: Dataset, n_actions: int, cfg: TransferConfig) -> TrainResult:
    agent_cfg = _agent_cfg(cfg, 4)
    agent_T = QAgent(D.feat_dim, n_actions, agent_cfg)

    def step_fn(batch, idx):
        loss = agent_T.dqn_update(batch)
        return (loss, loss, 0.0, 0.0, float(n_actions))

    rows = _train_loop(agent_T, D, cfg, step_fn)
    return TrainResult(agent_T, rows, D)


def train_target_hybrid(
    merged: Dataset,
    agent_S: QAgent,
    n_actions: int,
    cfg: TransferConfig,
    rl_scale: Optional[np.ndarray] = None,
) -> TrainResult:
    agent_cfg = _agent_cfg(cfg, 4)
    agent_T = QAgent(merged.feat_dim, n_actions, agent_cfg)
    use_ac = cfg.method != "no_ac"
    use_tl = cfg.method != "no_loss_tl"
    scale = None if rl_scale is None else torch.as_tensor(rl_scale, dtype=agent_T.dtype)

    def step_fn(batch, idx):
        out = hybrid_loss(
            agent_T, agent_S, batch, cfg.similarity, use_ac, use_tl,
            None if scale is None else scale[idx],
        )
        value = out.total.item()
        agent_T.apply(out.total)
        return (value, out.rl.item(), out.tl.item(), batch.w.mean().item(), out.mean_beta)

    rows = _train_loop(agent_T, merged, cfg, step_fn)
    return TrainResult(agent_T, rows, merged)


def run_algorithm1(
    D_S: Dataset,
    D_T: Dataset,
    cfg: TransferConfig,
    n_actions: Optional[int] = None,
    pretrained: Optional[Pretrained] = None,
) -> TrainResult:
    """Train the target agent for ``cfg.method``.

    ``pretrained`` lets several methods share one set of NSR models and one
    source agent (they depend only on the datasets and the seed).
    """
    cfg.validate()
    n_actions = n_actions or int(max(D_S.action_index.max(initial=0), D_T.action_index.max(initial=0)) + 1)
    n_actions = 1 << (n_actions - 1).bit_length()
    for name, D in (("source", D_S), ("target", D_T)):
        if not np.array_equal(D.r, D.r_ad + D.r_fee):
            raise ValueError(f"{name} dataset violates r = r_ad + r_fee")

    if cfg.method == "no_transfer":
        return train_target_dqn(D_T, n_actions, cfg)
    if cfg.method == "all_transfer":
        result = train_target_dqn(concat([D_S, D_T]), n_actions, cfg)
        result.n_source_kept = len(D_S)
        return result

    pre = pretrained or pretrain(D_S, D_T, n_actions, cfg)
    scale = float(np.std(D_T.r_N)) if len(D_T) > 1 else 1.0
    D_S_w = similarity_weights(D_S, pre, cfg, scale)
    D_T_w = similarity_weights(D_T, pre, cfg, scale)
    kept = filter_source(D_S_w, cfg.similarity)
    merged = concat([kept, D_T_w])
    rl_scale = None
    if cfg.similarity.weighted_mode:
        rl_scale = np.concatenate([kept.w, np.ones(len(D_T_w))])
    log.info(
        "%s: kept %d/%d source samples (mean w source %.3f, target %.3f)",
        cfg.method, len(kept), len(D_S), D_S_w.w.mean() if len(D_S) else np.nan,
        D_T_w.w.mean() if len(D_T) else np.nan,
    )
    result = train_target_hybrid(merged, pre.agent_S, n_actions, cfg, rl_scale)
    result.pretrained = pre
    result.n_source_kept = len(kept)
    return result


def write_log(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (int(v) if k == "iteration" else repr(float(v))) for k, v in row.items()})
