"""Synthetic ads-allocation feed.

Each request is an episode. On every screen the agent fills ``K`` slots,
choosing per slot between the head of the ad queue and the head of the
organic queue. Ads earn ``value * p_click``, organics earn ``value * p_buy``.
After the screen the user keeps scrolling with probability

    clamp(1 - fatigue * n_ads - depth_decay * screen_idx, 0, 1)

Users are either ``regular`` or ``divergent``; divergent users apply the
profile's ``deltas`` to (click_base, buy_base, fatigue). Two entrances that
share base parameters but differ in deltas therefore agree exactly on regular
users and disagree on divergent ones, which gives ground-truth labels for the
similarity weight.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

REGULAR = "regular"
DIVERGENT = "divergent"

SeedLike = Union[int, np.random.Generator, np.random.SeedSequence, None]


class ConfigError(ValueError):
    """Raised for invalid profiles or experiment configurations."""


@dataclass(frozen=True)
class EntranceProfile:
    entrance_id: str
    K: int = 3
    T_max: int = 8
    n_ad_cand: int = 24
    n_org_cand: int = 24
    ad_value_dist: Tuple[float, float] = (1.0, 0.5)
    org_value_dist: Tuple[float, float] = (1.0, 0.5)
    click_base: float = 0.3
    buy_base: float = 0.1
    fatigue: float = 0.1
    depth_decay: float = 0.05
    divergent_user_frac: float = 0.0
    # additive offsets on (click_base, buy_base, fatigue) for divergent users
    deltas: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "ad_value_dist", tuple(float(v) for v in self.ad_value_dist))
        object.__setattr__(self, "org_value_dist", tuple(float(v) for v in self.org_value_dist))
        object.__setattr__(self, "deltas", tuple(float(v) for v in self.deltas))
        self.validate()

    def validate(self) -> None:
        if self.K < 1 or self.T_max < 1:
            raise ConfigError(f"{self.entrance_id}: K and T_max must be >= 1")
        need = self.K * self.T_max
        if self.n_ad_cand < need or self.n_org_cand < need:
            raise ConfigError(
                f"{self.entrance_id}: candidate queues must hold >= K*T_max = {need} items"
            )
        if len(self.deltas) != 3:
            raise ConfigError(f"{self.entrance_id}: deltas must have 3 entries")
        for name, (mean, spread) in (("ad", self.ad_value_dist), ("org", self.org_value_dist)):
            if spread < 0 or mean - spread < 0:
                raise ConfigError(f"{self.entrance_id}: {name} values must stay >= 0")
        if not 0.0 <= self.divergent_user_frac <= 1.0:
            raise ConfigError(f"{self.entrance_id}: divergent_user_frac must lie in [0, 1]")
        for user_type in (REGULAR, DIVERGENT):
            click, buy, fatigue = self.effective(user_type)
            if not (0.0 < click < 1.0 and 0.0 < buy < 1.0):
                raise ConfigError(
                    f"{self.entrance_id}: {user_type} probabilities must lie in (0, 1), "
                    f"got click={click}, buy={buy}"
                )
            if fatigue < 0:
                raise ConfigError(f"{self.entrance_id}: {user_type} fatigue must be >= 0")
        if self.depth_decay < 0:
            raise ConfigError(f"{self.entrance_id}: depth_decay must be >= 0")

    def effective(self, user_type: str) -> Tuple[float, float, float]:
        """(p_click, p_buy, fatigue) for the given user type."""
        if user_type == DIVERGENT:
            d_click, d_buy, d_fatigue = self.deltas
            return (self.click_base + d_click, self.buy_base + d_buy, self.fatigue + d_fatigue)
        return (self.click_base, self.buy_base, self.fatigue)

    @property
    def n_actions(self) -> int:
        return 2 ** self.K

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("ad_value_dist", "org_value_dist", "deltas"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EntranceProfile":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown profile fields: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "EntranceProfile":
        return replace(self, **changes)


@dataclass(frozen=True)
class EnvState:
    user_type: str
    screen_idx: int
    ad_queue: Tuple[float, ...]
    org_queue: Tuple[float, ...]
    terminated: bool = False


@dataclass(frozen=True)
class Action:
    bits: Tuple[int, ...]

    @classmethod
    def from_index(cls, index: int, K: int) -> "Action":
        if not 0 <= index < 2 ** K:
            raise ValueError(f"action index {index} out of range for K={K}")
        return cls(tuple((index >> k) & 1 for k in range(K)))

    @property
    def index(self) -> int:
        return sum(bit << k for k, bit in enumerate(self.bits))

    @property
    def n_ads(self) -> int:
        return sum(self.bits)


@dataclass(frozen=True)
class StepOutcome:
    r: float
    r_ad: float
    r_fee: float
    next_state: EnvState = field(repr=False)

    @property
    def terminal(self) -> bool:
        return self.next_state.terminated


def reset(profile: EntranceProfile, rng_seed: SeedLike) -> EnvState:
    """Start a fresh request. ``rng_seed`` may be an int or a Generator."""
    rng = np.random.default_rng(rng_seed)
    divergent = rng.random() < profile.divergent_user_frac
    ad_mean, ad_spread = profile.ad_value_dist
    org_mean, org_spread = profile.org_value_dist
    ads = rng.uniform(ad_mean - ad_spread, ad_mean + ad_spread, size=profile.n_ad_cand)
    orgs = rng.uniform(org_mean - org_spread, org_mean + org_spread, size=profile.n_org_cand)
    return EnvState(
        user_type=DIVERGENT if divergent else REGULAR,
        screen_idx=0,
        ad_queue=tuple(float(v) for v in ads),
        org_queue=tuple(float(v) for v in orgs),
    )


def step(
    profile: EntranceProfile,
    state: EnvState,
    action: Union[Action, int],
    rng: np.random.Generator,
    expected: bool = False,
) -> StepOutcome:
    """Display one screen.

    With ``expected=True`` rewards are expectations (value * probability);
    the continuation draw is still sampled from ``rng``. Both modes consume
    ``K + 1`` uniforms so their random streams stay aligned.
    """
    if state.terminated:
        raise RuntimeError("step() called on a terminated state")
    K = profile.K
    if isinstance(action, (int, np.integer)):
        action = Action.from_index(int(action), K)
    if len(action.bits) != K:
        raise ValueError(f"action has {len(action.bits)} bits, expected {K}")
    n_ads = action.n_ads
    if len(state.ad_queue) < n_ads or len(state.org_queue) < K - n_ads:
        raise RuntimeError("candidate queues exhausted")

    p_click, p_buy, fatigue = profile.effective(state.user_type)
    draws = rng.random(K)
    r_ad = 0.0
    r_fee = 0.0
    i_ad = 0
    i_org = 0
    for k, bit in enumerate(action.bits):
        if bit:
            value, p = state.ad_queue[i_ad], p_click
            i_ad += 1
        else:
            value, p = state.org_queue[i_org], p_buy
            i_org += 1
        gain = value * p if expected else (value if draws[k] < p else 0.0)
        if bit:
            r_ad += gain
        else:
            r_fee += gain

    cont = min(max(1.0 - fatigue * n_ads - profile.depth_decay * state.screen_idx, 0.0), 1.0)
    keeps_scrolling = rng.random() < cont
    terminated = (not keeps_scrolling) or state.screen_idx + 1 >= profile.T_max
    next_state = EnvState(
        user_type=state.user_type,
        screen_idx=state.screen_idx + 1,
        ad_queue=state.ad_queue[i_ad:],
        org_queue=state.org_queue[i_org:],
        terminated=terminated,
    )
    return StepOutcome(r=r_ad + r_fee, r_ad=r_ad, r_fee=r_fee, next_state=next_state)


def feature_dim(K: int, L: int | None = None) -> int:
    L = 2 * K if L is None else L
    return 2 * L + 1 + 2 + 2


def featurize(state: EnvState, profile: EntranceProfile, L: int | None = None) -> np.ndarray:
    """Fixed layout shared by every entrance:

    ``[ad scores (L), organic scores (L), screen_idx / T_max,
    remaining ads / n_ad_cand, remaining organics / n_org_cand, one-hot user]``
    """
    L = 2 * profile.K if L is None else L
    out = np.zeros(feature_dim(profile.K, L))
    ads = state.ad_queue[:L]
    orgs = state.org_queue[:L]
    out[: len(ads)] = ads
    out[L : L + len(orgs)] = orgs
    out[2 * L] = state.screen_idx / profile.T_max
    out[2 * L + 1] = len(state.ad_queue) / profile.n_ad_cand
    out[2 * L + 2] = len(state.org_queue) / profile.n_org_cand
    out[2 * L + 3 + (state.user_type == DIVERGENT)] = 1.0
    return out


def is_divergent_feature(state_feat: np.ndarray) -> np.ndarray:
    """Oracle user-type label recovered from featurized states (last entry)."""
    return np.asarray(state_feat)[..., -1] > 0.5


def load_profiles(path: Union[str, Path]) -> Dict[str, EntranceProfile]:
    """Read ``{"entrances": {"<name>": {...profile fields...}}}`` from JSON."""
    with open(path) as fh:
        raw = json.load(fh)
    entrances = raw.get("entrances", raw)
    profiles = {}
    for name, d in entrances.items():
        d = dict(d)
        d.setdefault("entrance_id", name)
        profiles[name] = EntranceProfile.from_dict(d)
    return profiles
