"""Experiment configuration (JSON) tying entrances, data sizes and training together."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Dict, Optional, Union

from .agent import AgentConfig
from .env import ConfigError, EntranceProfile
from .nsr import NsrConfig
from .similarity import SimilarityConfig
from .trainer import TransferConfig


def default_profiles() -> Dict[str, EntranceProfile]:
    """Source and target entrances that agree on regular users only.

    Regular users make a mixed allocation optimal (one ad per screen is best
    among fixed counts). Divergent target users click far more and tire
    less, so they reward ad-heavy screens; the source entrance's divergent
    users behave like regular ones and are a poor guide for them.
    """
    base = dict(
        K=3,
        T_max=8,
        n_ad_cand=24,
        n_org_cand=24,
        ad_value_dist=(1.0, 0.9),
        org_value_dist=(0.5, 0.45),
        click_base=0.5,
        buy_base=0.4,
        fatigue=0.12,
        depth_decay=0.03,
        divergent_user_frac=0.5,
    )
    return {
        "source": EntranceProfile(entrance_id="source", deltas=(0.0, 0.0, 0.0), **base),
        "target": EntranceProfile(entrance_id="target", deltas=(0.4, 0.0, -0.08), **base),
    }


@dataclass
class ExperimentConfig:
    profiles: Dict[str, EntranceProfile] = field(default_factory=default_profiles)
    source: str = "source"
    target: str = "target"
    n_source: int = 50000
    n_target: int = 2000
    eval_episodes: int = 2000
    feature_L: Optional[int] = None
    transfer: TransferConfig = field(default_factory=TransferConfig)

    @property
    def source_profile(self) -> EntranceProfile:
        return self._profile(self.source)

    @property
    def target_profile(self) -> EntranceProfile:
        return self._profile(self.target)

    @property
    def n_actions(self) -> int:
        return self.target_profile.n_actions

    def _profile(self, name: str) -> EntranceProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise ConfigError(f"no entrance named {name!r} in config") from None

    def validate(self) -> None:
        src, tgt = self.source_profile, self.target_profile
        if src.K != tgt.K:
            raise ConfigError("source and target entrances must share K")
        if self.n_source < 1 or self.n_target < 1 or self.eval_episodes < 1:
            raise ConfigError("dataset sizes and eval_episodes must be >= 1")
        self.transfer.validate()

    def replace(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for key, value in changes.items():
            setattr(new, key, value)
        return new

    def with_transfer(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for key, value in changes.items():
            setattr(new.transfer, key, value)
        return new

    def to_dict(self) -> dict:
        return {
            "entrances": {name: p.to_dict() for name, p in self.profiles.items()},
            "source": self.source,
            "target": self.target,
            "n_source": self.n_source,
            "n_target": self.n_target,
            "eval_episodes": self.eval_episodes,
            "feature_L": self.feature_L,
            "transfer": _plain(self.transfer),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        cfg = cls()
        if "entrances" in d:
            profiles = {}
            for name, p in d.pop("entrances").items():
                p = dict(p)
                p.setdefault("entrance_id", name)
                profiles[name] = EntranceProfile.from_dict(p)
            cfg.profiles = profiles
        if "transfer" in d:
            cfg.transfer = _transfer_from_dict(d.pop("transfer"))
        for key, value in d.items():
            if key not in {f.name for f in fields(cls)}:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg


def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _transfer_from_dict(d: dict) -> TransferConfig:
    d = dict(d)
    nested = {"similarity": SimilarityConfig, "nsr": NsrConfig, "agent": AgentConfig}
    kwargs = {}
    for key, klass in nested.items():
        if key in d:
            kwargs[key] = klass(**d.pop(key))
    try:
        return TransferConfig(**kwargs, **d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
