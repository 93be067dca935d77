import math

import numpy as np
import pytest
import torch

from adtransfer.dataset import Dataset, annotate_nsr, generate
from adtransfer.nsr import (
    NsrConfig,
    NsrModel,
    elbo,
    init_model,
    load_model,
    predict,
    save_model,
    train_nsr,
)

from oracles import central_difference, exact_gp, rel_err, rbf


def regression_dataset(n, d=3, n_actions=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (n, d))
    a = rng.integers(n_actions, size=n)
    y = np.sin(x.sum(1)) + 0.5 * a + 0.1 * rng.normal(size=n)
    return Dataset(
        ["e"] * n, np.arange(n), np.zeros(n), x, a, y, y, np.zeros(n),
        np.zeros((n, d)), np.ones(n, bool), r_N=y,
    )


def gp_inputs(dataset, n_actions):
    return np.concatenate([dataset.state_feat, np.eye(n_actions)[dataset.action_index]], axis=1)


def exact_config(n, epochs):
    # identity extractor, inducing points pinned to the data, only q(u) learned
    return NsrConfig(
        M=n, hidden=(), epochs=epochs, lr=1e-2, batch_size=n, max_steps=0,
        learn_extractor=False, learn_hypers=False, learn_inducing=False,
        init_lengthscale=1.5, init_noise_frac=0.05,
    )


class TestKernel:
    def test_matches_dense_rbf(self, rng):
        m = NsrModel(3, 2, hidden=(), M=4)
        with torch.no_grad():
            m.log_signal_var.fill_(math.log(1.7))
            m.log_lengthscale.fill_(math.log(0.6))
        x, y = rng.normal(size=(6, 5)), rng.normal(size=(4, 5))
        got = m.kernel(torch.as_tensor(x), torch.as_tensor(y)).detach().numpy()
        np.testing.assert_allclose(got, rbf(x, y, 1.7, 0.6), rtol=1e-12, atol=1e-14)

    def test_embedding_width(self):
        m = NsrModel(7, 8)
        assert m.embed(np.zeros((3, 7)), [0, 1, 7]).shape == (3, 32)


class TestAgainstExactGP:
    def test_inducing_at_data_recovers_exact_posterior(self):
        n = 20
        D = regression_dataset(n, seed=1)
        history = []
        m = train_nsr(D, 2, exact_config(n, 600), history=history)
        X = gp_inputs(D, 2)
        test = regression_dataset(15, seed=2)
        log_ev, mu, var = exact_gp(
            X, D.r_N, gp_inputs(test, 2), m.signal_var.item(), m.lengthscale.item(), m.noise_var.item()
        )
        got_mu, got_var = m.predict_batch(test.state_feat, test.action_index)
        assert np.abs(got_mu - mu).mean() < 1e-2
        assert np.abs(got_var - var).max() < 1e-2
        assert max(history) <= log_ev
        assert history[-1] > log_ev - 0.05

    def test_elbo_below_evidence_at_init(self):
        D = regression_dataset(12, seed=3)
        cfg = exact_config(12, 1)
        m = init_model(D, 2, cfg)
        with torch.no_grad():
            value = elbo(m, (D.state_feat, D.action_index, D.r_N), len(D)).item()
        log_ev, _, _ = exact_gp(gp_inputs(D, 2), D.r_N, gp_inputs(D, 2)[:1],
                                m.signal_var.item(), m.lengthscale.item(), m.noise_var.item())
        assert value <= log_ev


def flat_params(model):
    return [p for p in model.parameters()]


def elbo_gradient_check(model, batch, n):
    params = flat_params(model)
    loss = elbo(model, batch, n)
    grads = torch.autograd.grad(loss, params)
    analytic = torch.cat([g.reshape(-1) for g in grads]).numpy()
    x0 = torch.cat([p.detach().reshape(-1) for p in params]).numpy().copy()

    def f(x):
        with torch.no_grad():
            offset = 0
            for p in params:
                k = p.numel()
                p.copy_(torch.as_tensor(x[offset : offset + k]).reshape(p.shape))
                offset += k
            return elbo(model, batch, n).item()

    numeric = central_difference(f, x0)
    f(x0)
    return rel_err(analytic, numeric)


class TestElbo:
    def test_gradient_matches_finite_differences(self):
        D = regression_dataset(10, seed=4)
        cfg = NsrConfig(M=4, hidden=(5,), seed=3)
        m = init_model(D, 2, cfg)
        with torch.no_grad():
            m.q_chol_raw.add_(0.1 * torch.randn(4, 4, generator=torch.Generator().manual_seed(0)))
        batch = (D.state_feat[:6], D.action_index[:6], D.r_N[:6])
        assert elbo_gradient_check(m, batch, len(D)) < 1e-4

    def test_empty_batch_raises(self):
        m = NsrModel(3, 2, hidden=(), M=2)
        with pytest.raises(ValueError):
            elbo(m, (np.zeros((0, 3)), np.zeros(0, int), np.zeros(0)), 5)

    def test_minibatch_scaling(self):
        D = regression_dataset(8, seed=5)
        m = init_model(D, 2, NsrConfig(M=3, hidden=(4,)))
        with torch.no_grad():
            full = elbo(m, (D.state_feat, D.action_index, D.r_N), 8).item()
            halves = [elbo(m, (D.state_feat[s], D.action_index[s], D.r_N[s]), 8).item()
                      for s in (slice(0, 4), slice(4, 8))]
            kl = m.prior_kl().item()
        # the two half-batch estimates average to the full-batch value
        assert np.isclose(np.mean(halves), full, rtol=1e-12, atol=1e-10)
        assert kl >= 0


class TestTraining:
    def test_deterministic(self):
        D = regression_dataset(40)
        cfg = NsrConfig(M=6, hidden=(8,), epochs=3, batch_size=16)
        a, b = train_nsr(D, 2, cfg), train_nsr(D, 2, cfg)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_variance_positive_and_floored(self, rng):
        D = regression_dataset(30)
        m = train_nsr(D, 2, NsrConfig(M=5, hidden=(8,), epochs=2, batch_size=10))
        _, var = m.predict_batch(rng.normal(size=(50, 3)) * 100, rng.integers(2, size=50))
        assert np.all(var >= 1e-9)

    def test_rejects_unannotated_and_empty(self, profiles):
        D = generate(profiles["source"], None, 3, seed=0)
        with pytest.raises(ValueError, match="r_N"):
            train_nsr(D, 8, NsrConfig(M=2, hidden=(4,)))
        with pytest.raises(ValueError):
            train_nsr(D.subset(slice(0, 0)), 8, NsrConfig(M=2, hidden=(4,)))

    def test_learns_something_on_simulator_data(self, profiles):
        D = annotate_nsr(generate(profiles["target"], None, 300, seed=0), 3, 0.9)
        history = []
        train_nsr(D, 8, NsrConfig(M=16, hidden=(32, 16), epochs=10, lr=1e-2), history=history)
        assert history[-1] > history[0]

    def test_checkpoint_round_trip(self, tmp_path):
        D = regression_dataset(20)
        m = train_nsr(D, 2, NsrConfig(M=4, hidden=(6,), epochs=1, batch_size=10))
        save_model(m, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        assert predict(back, D.state_feat[0], D.action_index[0]) == predict(m, D.state_feat[0], D.action_index[0])

    def test_single_prediction_shape(self):
        m = NsrModel(3, 2, hidden=(), M=2)
        p = predict(m, np.zeros(3), 1)
        assert isinstance(p.mu, float) and p.var > 0
