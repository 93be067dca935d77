"""Uncertainty-aware MDP similarity and the two transfer knobs built on it.

``w = 1 - KL(p_S(s, a) || p_T(s, a))`` compares the source and target NSR
models' Gaussian predictions at a logged (s, a). The weight drives the hard
instance filter (keep source samples with ``w >= tau``) and the size ``beta``
of the action set the target agent may maximize over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .nsr import GaussPred, NsrModel


@dataclass
class SimilarityConfig:
    tau: float = 0.75
    clamp_weights: bool = True
    beta_min: int = 1
    beta_max: int = 8
    weighted_mode: bool = False
    # "shrink": higher similarity -> fewer allowed actions; "grow" reverses it
    beta_direction: str = "shrink"

    def __post_init__(self):
        if not 1 <= self.beta_min <= self.beta_max:
            raise ValueError("need 1 <= beta_min <= beta_max")
        if self.beta_direction not in ("shrink", "grow"):
            raise ValueError(f"unknown beta_direction {self.beta_direction!r}")


def kl_gauss(p: GaussPred, q: GaussPred) -> float:
    """KL(p || q) between univariate Gaussians."""
    if p.var <= 0 or q.var <= 0:
        raise ValueError("variances must be positive")
    return (
        0.5 * math.log(q.var / p.var)
        + (p.var + (p.mu - q.mu) ** 2) / (2 * q.var)
        - 0.5
    )


def kl_gauss_array(mu_p, var_p, mu_q, var_q) -> np.ndarray:
    """Vectorized :func:`kl_gauss`."""
    var_p = np.asarray(var_p, dtype=np.float64)
    var_q = np.asarray(var_q, dtype=np.float64)
    if (var_p <= 0).any() or (var_q <= 0).any():
        raise ValueError("variances must be positive")
    diff = np.asarray(mu_p) - np.asarray(mu_q)
    return 0.5 * np.log(var_q / var_p) + (var_p + diff ** 2) / (2 * var_q) - 0.5


def weight(p_S: GaussPred, p_T: GaussPred, cfg: SimilarityConfig = SimilarityConfig()) -> float:
    w = 1.0 - kl_gauss(p_S, p_T)
    return min(max(w, 0.0), 1.0) if cfg.clamp_weights else w


def weights_from_predictions(mu_S, var_S, mu_T, var_T, cfg: SimilarityConfig) -> np.ndarray:
    w = 1.0 - kl_gauss_array(mu_S, var_S, mu_T, var_T)
    return np.clip(w, 0.0, 1.0) if cfg.clamp_weights else w


def annotate_weights(
    dataset: Dataset, model_S: NsrModel, model_T: NsrModel, cfg: SimilarityConfig, chunk: int = 4096
) -> Dataset:
    """Attach ``w`` to every transition (source and target samples alike)."""
    w = np.empty(len(dataset))
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        feats, acts = dataset.state_feat[sl], dataset.action_index[sl]
        mu_S, var_S = model_S.predict_batch(feats, acts)
        mu_T, var_T = model_T.predict_batch(feats, acts)
        w[sl] = weights_from_predictions(mu_S, var_S, mu_T, var_T, cfg)
    return dataset.copy(w=w)


def filter_source(dataset_S: Dataset, cfg: SimilarityConfig) -> Dataset:
    """Hard mode keeps transitions with ``w >= tau``; weighted mode keeps all."""
    if not dataset_S.has_weights:
        raise ValueError("dataset has no similarity weights; run annotate_weights first")
    if cfg.weighted_mode:
        return dataset_S.copy()
    return dataset_S.subset(dataset_S.w >= cfg.tau)


def beta_from_weight(w: float, n_actions: int, cfg: SimilarityConfig) -> int:
    """Linear map from ``w`` in [0, 1] to a top-beta action-set size.

    Rounds half to even; the result is clamped to [beta_min, min(beta_max, n_actions)].
    """
    lo, hi = cfg.beta_min, min(cfg.beta_max, n_actions)
    w = min(max(float(w), 0.0), 1.0)
    if cfg.beta_direction == "shrink":
        raw = hi - w * (hi - lo)
    else:
        raw = lo + w * (hi - lo)
    return int(min(max(round(raw), lo), hi))


def beta_array(w: np.ndarray, n_actions: int, cfg: SimilarityConfig) -> np.ndarray:
    lo, hi = cfg.beta_min, min(cfg.beta_max, n_actions)
    w = np.clip(np.asarray(w, dtype=np.float64), 0.0, 1.0)
    raw = hi - w * (hi - lo) if cfg.beta_direction == "shrink" else lo + w * (hi - lo)
    # np.rint rounds half to even, like round()
    return np.clip(np.rint(raw), lo, hi).astype(np.int64)


def mean_only_weights(mu_S, mu_T, scale: float) -> np.ndarray:
    """Similarity from predicted means alone: ``clamp(1 - |mu_S - mu_T| / scale, 0, 1)``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    return np.clip(1.0 - np.abs(np.asarray(mu_S) - np.asarray(mu_T)) / scale, 0.0, 1.0)
