"""Distributional N-step-return model: MLP feature extractor + sparse variational GP.

The GP lives on the extractor's embedding of ``concat(state_feat, onehot(a))``
and uses an RBF kernel. The variational posterior over inducing outputs is
``q(u) = N(m, L L^T)`` in the non-whitened parameterization, with prior
``p(u) = N(0, K_ZZ)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .dataset import Dataset

log = logging.getLogger(__name__)

JITTER = 1e-6
VAR_FLOOR = 1e-9
CHECKPOINT_FORMAT = "adtransfer.nsr"
CHECKPOINT_VERSION = 1


class GaussPred(NamedTuple):
    mu: float
    var: float


@dataclass
class NsrConfig:
    M: int = 64
    hidden: Tuple[int, ...] = (128, 64, 32)
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    # caps the number of optimizer steps across all epochs (0 = no cap)
    max_steps: int = 3000
    learn_extractor: bool = True
    learn_hypers: bool = True
    learn_inducing: bool = True
    init_lengthscale: float = 1.0
    # initial noise variance as a fraction of var(r_N)
    init_noise_frac: float = 0.5
    dtype: str = "float64"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


def _dtype(name: str) -> torch.dtype:
    return {"float64": torch.float64, "float32": torch.float32}[name]


class NsrModel(nn.Module):
    def __init__(
        self,
        feat_dim: int,
        n_actions: int,
        hidden: Sequence[int] = (128, 64, 32),
        M: int = 64,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.feat_dim = feat_dim
        self.n_actions = n_actions
        self.hidden = tuple(hidden)
        layers = []
        width = feat_dim + n_actions
        for h in self.hidden:
            layers += [nn.Linear(width, h), nn.Tanh()]
            width = h
        self.extractor = nn.Sequential(*layers)
        self.embed_dim = width
        self.log_signal_var = nn.Parameter(torch.zeros(()))
        self.log_lengthscale = nn.Parameter(torch.zeros(()))
        self.log_noise_var = nn.Parameter(torch.tensor(math.log(0.1)))
        self.Z = nn.Parameter(torch.zeros(M, width))
        self.q_mu = nn.Parameter(torch.zeros(M))
        # strict lower triangle is free; the diagonal is stored as a log
        self.q_chol_raw = nn.Parameter(torch.zeros(M, M))
        self.to(dtype)

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.Z.dtype

    @property
    def signal_var(self):
        return self.log_signal_var.exp()

    @property
    def lengthscale(self):
        return self.log_lengthscale.exp()

    @property
    def noise_var(self):
        return self.log_noise_var.exp()

    def q_chol(self) -> torch.Tensor:
        raw = self.q_chol_raw
        return torch.tril(raw, -1) + torch.diag_embed(torch.diagonal(raw).exp())

    def set_q_chol(self, L: torch.Tensor) -> None:
        with torch.no_grad():
            raw = torch.tril(L, -1).clone()
            raw.diagonal().copy_(torch.diagonal(L).log())
            self.q_chol_raw.copy_(raw)

    def inputs(self, state_feat, action_index) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(state_feat), dtype=self.dtype)
        a = torch.as_tensor(np.asarray(action_index), dtype=torch.long)
        if x.ndim == 1:
            x, a = x[None], a.reshape(1)
        onehot = nn.functional.one_hot(a, self.n_actions).to(self.dtype)
        return torch.cat([x, onehot], dim=1)

    def embed(self, state_feat, action_index) -> torch.Tensor:
        return self.extractor(self.inputs(state_feat, action_index))

    def kernel(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """RBF Gram matrix ``signal_var * exp(-|x - y|^2 / (2 lengthscale^2))``."""
        sq = ((x ** 2).sum(1)[:, None] + (y ** 2).sum(1)[None, :] - 2 * x @ y.T).clamp_min(0.0)
        return self.signal_var * torch.exp(-0.5 * sq / self.lengthscale ** 2)

    def _kzz_chol(self) -> torch.Tensor:
        eye = torch.eye(self.M, dtype=self.dtype)
        Kzz = self.kernel(self.Z, self.Z) + JITTER * eye
        Lz, info = torch.linalg.cholesky_ex(Kzz)
        if info.item() != 0:
            raise FloatingPointError("Cholesky of K_ZZ failed even with jitter")
        return Lz

    def prior_kl(self, Lz: Optional[torch.Tensor] = None) -> torch.Tensor:
        """KL(N(m, S) || N(0, K_ZZ))."""
        Lz = self._kzz_chol() if Lz is None else Lz
        L = self.q_chol()
        solve = torch.linalg.solve_triangular
        trace = (solve(Lz, L, upper=False) ** 2).sum()
        maha = (solve(Lz, self.q_mu[:, None], upper=False) ** 2).sum()
        logdet_k = 2 * torch.log(torch.diagonal(Lz)).sum()
        logdet_s = 2 * torch.log(torch.diagonal(L)).sum()
        return 0.5 * (trace + maha - self.M + logdet_k - logdet_s)

    def latent(self, emb: torch.Tensor, Lz: Optional[torch.Tensor] = None):
        """Marginal mean/variance of q(f) at embeddings ``emb``."""
        Lz = self._kzz_chol() if Lz is None else Lz
        solve = torch.linalg.solve_triangular
        A = solve(Lz, self.kernel(self.Z, emb), upper=False)  # Lz^-1 K_ZX
        Kinv_kzx = solve(Lz.T, A, upper=True)  # K_ZZ^-1 K_ZX
        mean = Kinv_kzx.T @ self.q_mu
        LtB = self.q_chol().T @ Kinv_kzx
        var = self.signal_var - (A ** 2).sum(0) + (LtB ** 2).sum(0)
        return mean, var

    def predict_tensor(self, state_feat, action_index):
        emb = self.embed(state_feat, action_index)
        mean, var = self.latent(emb)
        return mean, (var + self.noise_var).clamp_min(VAR_FLOOR)

    @torch.no_grad()
    def predict_batch(self, state_feat, action_index) -> Tuple[np.ndarray, np.ndarray]:
        mean, var = self.predict_tensor(state_feat, action_index)
        return mean.numpy().astype(np.float64), var.numpy().astype(np.float64)


def elbo(model: NsrModel, batch, dataset_size: int) -> torch.Tensor:
    """Minibatch ELBO for targets ``batch = (state_feat, action_index, r_N)``.

    ``(n / |B|) * sum_i E_q[log N(y_i | f_i, noise)] - KL(q(u) || p(u))``.
    """
    state_feat, action_index, y = batch
    y = torch.as_tensor(np.asarray(y), dtype=model.dtype).reshape(-1)
    if y.numel() == 0:
        raise ValueError("empty batch")
    Lz = model._kzz_chol()
    mean, var = model.latent(model.embed(state_feat, action_index), Lz)
    noise = model.noise_var
    ell = -0.5 * math.log(2 * math.pi) - 0.5 * torch.log(noise) - 0.5 * ((y - mean) ** 2 + var) / noise
    return dataset_size / y.numel() * ell.sum() - model.prior_kl(Lz)


def predict(model: NsrModel, state_feat, action_index) -> GaussPred:
    mean, var = model.predict_batch(state_feat, action_index)
    return GaussPred(float(mean[0]), float(var[0]))


def init_model(dataset: Dataset, n_actions: int, cfg: NsrConfig) -> NsrModel:
    torch.manual_seed(cfg.seed)
    model = NsrModel(dataset.feat_dim, n_actions, cfg.hidden, cfg.M, _dtype(cfg.dtype))
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(dataset)
    idx = rng.choice(n, size=cfg.M, replace=n < cfg.M)
    y = dataset.r_N
    with torch.no_grad():
        model.log_lengthscale.fill_(math.log(cfg.init_lengthscale))
        model.log_signal_var.fill_(math.log(max(float(np.mean(y ** 2)), 1e-3)))
        model.log_noise_var.fill_(math.log(max(cfg.init_noise_frac * float(np.var(y)), 1e-6)))
        model.Z.copy_(model.embed(dataset.state_feat[idx], dataset.action_index[idx]))
        model.q_mu.copy_(torch.as_tensor(y[idx], dtype=model.dtype))
        model.set_q_chol(model._kzz_chol())
    return model


def _trainable(model: NsrModel, cfg: NsrConfig):
    params = [model.q_mu, model.q_chol_raw]
    if cfg.learn_inducing:
        params.append(model.Z)
    if cfg.learn_hypers:
        params += [model.log_signal_var, model.log_lengthscale, model.log_noise_var]
    if cfg.learn_extractor:
        params += list(model.extractor.parameters())
    return params


def train_nsr(
    dataset: Dataset,
    n_actions: int,
    cfg: NsrConfig = NsrConfig(),
    model: Optional[NsrModel] = None,
    history: Optional[list] = None,
) -> NsrModel:
    """Maximize the ELBO with Adam; deterministic given ``cfg.seed``.

    When ``history`` is a list, the full-data ELBO is appended after every
    epoch (only sensible for small datasets).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train an NSR model on an empty dataset")
    if not dataset.has_nsr:
        raise ValueError("dataset has no r_N annotation")
    model = init_model(dataset, n_actions, cfg) if model is None else model
    opt = torch.optim.Adam(_trainable(model, cfg), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    full = (dataset.state_feat, dataset.action_index, dataset.r_N)
    steps = 0
    for epoch in range(cfg.epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = order[start : start + bs]
            batch = (dataset.state_feat[idx], dataset.action_index[idx], dataset.r_N[idx])
            # per-datum scale keeps Adam's effective step comparable across sizes
            loss = -elbo(model, batch, n) / n
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            if cfg.max_steps and steps >= cfg.max_steps:
                break
        if history is not None:
            with torch.no_grad():
                history.append(float(elbo(model, full, n)))
        if cfg.max_steps and steps >= cfg.max_steps:
            break
    log.debug("nsr trained: %d steps, noise=%.4g", steps, model.noise_var.item())
    return model


def to_checkpoint(model: NsrModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "feat_dim": model.feat_dim,
        "n_actions": model.n_actions,
        "hidden": list(model.hidden),
        "M": model.M,
        "dtype": str(model.dtype).replace("torch.", ""),
        "params": {k: v.tolist() for k, v in model.state_dict().items()},
    }


def from_checkpoint(ckpt: dict) -> NsrModel:
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not an NSR model checkpoint (or unsupported version)")
    dtype = _dtype(ckpt["dtype"])
    model = NsrModel(ckpt["feat_dim"], ckpt["n_actions"], ckpt["hidden"], ckpt["M"], dtype)
    model.load_state_dict({k: torch.tensor(v, dtype=dtype) for k, v in ckpt["params"].items()})
    return model


def save_model(model: NsrModel, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(model)))


def load_model(path: Union[str, Path]) -> NsrModel:
    return from_checkpoint(json.loads(Path(path).read_text()))
