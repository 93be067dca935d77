"""Q-network over the 2^K joint slot actions, with a periodically synced target copy."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .dataset import Dataset
from .env import Action

CHECKPOINT_FORMAT = "adtransfer.qagent"
CHECKPOINT_VERSION = 1


class Batch(NamedTuple):
    state_feat: torch.Tensor
    action_index: torch.Tensor
    r: torch.Tensor
    next_state_feat: torch.Tensor
    terminal: torch.Tensor
    w: torch.Tensor

    @classmethod
    def from_dataset(cls, dataset: Dataset, index=None, dtype=torch.float64) -> "Batch":
        index = slice(None) if index is None else index
        w = dataset.w[index]
        return cls(
            torch.as_tensor(dataset.state_feat[index], dtype=dtype),
            torch.as_tensor(dataset.action_index[index], dtype=torch.long),
            torch.as_tensor(dataset.r[index], dtype=dtype),
            torch.as_tensor(dataset.next_state_feat[index], dtype=dtype),
            torch.as_tensor(dataset.terminal[index], dtype=torch.bool),
            torch.as_tensor(w, dtype=dtype),
        )


@dataclass
class AgentConfig:
    hidden: Sequence[int] = (64, 64)
    gamma: float = 0.9
    lr: float = 1e-3
    sync_interval: int = 100
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


def _mlp(in_dim: int, hidden: Sequence[int], out_dim: int) -> nn.Sequential:
    layers, width = [], in_dim
    for h in hidden:
        layers += [nn.Linear(width, h), nn.ReLU()]
        width = h
    layers.append(nn.Linear(width, out_dim))
    return nn.Sequential(*layers)


class QAgent:
    def __init__(self, feat_dim: int, n_actions: int, cfg: AgentConfig = AgentConfig()):
        if n_actions < 1 or n_actions & (n_actions - 1):
            raise ValueError("n_actions must be a power of two")
        self.feat_dim = feat_dim
        self.n_actions = n_actions
        self.K = n_actions.bit_length() - 1
        self.cfg = cfg
        self.gamma = cfg.gamma
        self.sync_interval = cfg.sync_interval
        self.dtype = {"float64": torch.float64, "float32": torch.float32}[cfg.dtype]
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        self.online = _mlp(feat_dim, cfg.hidden, n_actions).to(self.dtype)
        torch.random.set_rng_state(gen_state)
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.Adam(self.online.parameters(), lr=cfg.lr)
        self.n_updates = 0

    def _net(self, which: str) -> nn.Module:
        if which == "online":
            return self.online
        if which == "target":
            return self.target
        raise ValueError(f"which must be 'online' or 'target', got {which!r}")

    def _tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    @torch.no_grad()
    def q_values(self, state_feat, which: str = "online") -> np.ndarray:
        x = self._tensor(state_feat)
        out = self._net(which)(x if x.ndim > 1 else x[None])
        out = out.numpy().astype(np.float64)
        return out if np.ndim(state_feat) > 1 else out[0]

    def act(self, state_feat, epsilon: float, rng: np.random.Generator) -> Action:
        """Greedy with probability 1 - epsilon (ties -> lowest index), else uniform."""
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if rng.random() < epsilon:
            return Action.from_index(int(rng.integers(self.n_actions)), self.K)
        return Action.from_index(int(np.argmax(self.q_values(state_feat))), self.K)

    def greedy(self, state_feat: np.ndarray) -> np.ndarray:
        return np.argmax(self.q_values(state_feat), axis=1)

    def td_targets(self, r, next_state_feat, terminal, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``r`` on terminal rows, else ``r + gamma * max_{a' in mask} Q_target(s', a')``."""
        with torch.no_grad():
            q_next = self.target(next_state_feat)
            if mask is not None:
                if not bool(mask.any(1).all()):
                    raise ValueError("restricted action set is empty")
                q_next = q_next.masked_fill(~mask, float("-inf"))
            best = q_next.max(1).values
            return torch.where(terminal, r, r + self.gamma * best)

    def td_target(self, r: float, next_state_feat, terminal: bool, restrict=None) -> float:
        if terminal:
            return float(r)
        mask = None
        if restrict is not None:
            restrict = list(restrict)
            if not restrict:
                raise ValueError("restricted action set is empty")
            mask = torch.zeros(1, self.n_actions, dtype=torch.bool)
            mask[0, restrict] = True
        out = self.td_targets(
            self._tensor([r]),
            self._tensor(next_state_feat).reshape(1, -1),
            torch.tensor([False]),
            mask,
        )
        return float(out[0])

    def q_taken(self, batch: Batch) -> torch.Tensor:
        return self.online(batch.state_feat).gather(1, batch.action_index[:, None]).squeeze(1)

    def dqn_loss(self, batch: Batch) -> torch.Tensor:
        target = self.td_targets(batch.r, batch.next_state_feat, batch.terminal)
        return ((target - self.q_taken(batch)) ** 2).mean()

    def apply(self, loss: torch.Tensor) -> None:
        """One optimizer step on ``loss``; syncs the target net every ``sync_interval`` calls."""
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.n_updates += 1
        if self.sync_interval and self.n_updates % self.sync_interval == 0:
            self.sync()

    def dqn_update(self, batch: Batch, lr: Optional[float] = None) -> float:
        if len(batch.r) == 0:
            raise ValueError("empty batch")
        if lr is not None:
            for group in self.optimizer.param_groups:
                group["lr"] = lr
        loss = self.dqn_loss(batch)
        value = loss.item()
        self.apply(loss)
        return value

    def sync(self) -> None:
        self.target.load_state_dict(self.online.state_dict())

    def freeze(self) -> "QAgent":
        for p in self.online.parameters():
            p.requires_grad_(False)
        return self

    def parameters_vector(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.online.parameters()]).numpy().copy()

    def to_checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "feat_dim": self.feat_dim,
            "n_actions": self.n_actions,
            "config": {**self.cfg.__dict__, "hidden": list(self.cfg.hidden)},
            "n_updates": self.n_updates,
            "online": {k: v.tolist() for k, v in self.online.state_dict().items()},
            "target": {k: v.tolist() for k, v in self.target.state_dict().items()},
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "QAgent":
        if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a Q-agent checkpoint (or unsupported version)")
        agent = cls(ckpt["feat_dim"], ckpt["n_actions"], AgentConfig(**ckpt["config"]))
        for net, key in ((agent.online, "online"), (agent.target, "target")):
            net.load_state_dict({k: torch.tensor(v, dtype=agent.dtype) for k, v in ckpt[key].items()})
        agent.n_updates = ckpt["n_updates"]
        return agent

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_checkpoint()))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "QAgent":
        return cls.from_checkpoint(json.loads(Path(path).read_text()))


def train_dqn(
    agent: QAgent,
    dataset: Dataset,
    iterations: int,
    batch_size: int,
    seed: int,
) -> list:
    """Plain offline DQN on ``dataset``; returns the per-iteration losses."""
    rng = np.random.default_rng([seed, 3])
    full = Batch.from_dataset(dataset, dtype=agent.dtype)
    losses = []
    n = len(dataset)
    for _ in range(iterations):
        idx = torch.as_tensor(rng.integers(n, size=min(batch_size, n)))
        losses.append(agent.dqn_update(Batch(*(col[idx] for col in full))))
    return losses
