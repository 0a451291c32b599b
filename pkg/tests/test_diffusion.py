import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from cocodiff.diffusion import (Denoiser, DenoiserConfig, denoise_predict, make_schedule,
                                posterior_coefficients, posterior_step, q_sample, sample,
                                scaled_beta_bounds, time_embedding)
from cocodiff.errors import ConfigError, ShapeError

from conftest import assert_grad_matches


def _schedule(T):
    return make_schedule(T, *scaled_beta_bounds(T))


def test_constant_beta_alpha_bar():
    s = make_schedule(3, 0.1, 0.1)
    assert np.allclose(s.alpha_bar[1:], [0.9, 0.81, 0.729], atol=1e-15)
    assert s.alpha_bar[0] == 1.0


@pytest.mark.parametrize("T", [1, 2, 10, 30, 40, 1000])
def test_schedule_invariants(T):
    s = _schedule(T)
    assert len(s.betas) == T
    assert ((s.betas > 0) & (s.betas < 1)).all()
    assert (np.diff(s.alpha_bar) < 0).all()
    assert s.alpha_bar[T] > 0
    assert (s.posterior_var >= 0).all()
    assert s.posterior_var[1] == 0.0


def test_single_step_schedule():
    s = make_schedule(1, 0.3, 0.3)
    assert s.alpha_bar[1] == pytest.approx(0.7)


@pytest.mark.parametrize("bounds", [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)])
def test_schedule_rejects_bad_bounds(bounds):
    with pytest.raises(ConfigError):
        make_schedule(5, *bounds)
    with pytest.raises(ConfigError):
        make_schedule(0, 0.1, 0.2)


def test_scaled_bounds_clip():
    assert scaled_beta_bounds(1000) == (1e-4, 0.02)
    assert scaled_beta_bounds(50) == pytest.approx((0.002, 0.4))
    assert scaled_beta_bounds(10) == pytest.approx((0.01, 0.999))


def test_q_sample_closed_form():
    s = make_schedule(2, 0.1, 0.1)
    x0 = torch.tensor([1.0, 2.0], dtype=torch.float64)
    got = q_sample(s, x0, 2, torch.ones(2, dtype=torch.float64))
    r = math.sqrt(0.19)
    assert torch.allclose(got, torch.tensor([0.9 + r, 1.8 + r], dtype=torch.float64), atol=1e-12)
    assert torch.allclose(q_sample(s, x0, 2, torch.zeros(2, dtype=torch.float64)), 0.9 * x0)
    assert torch.allclose(q_sample(s, torch.zeros(2, dtype=torch.float64), 2, x0), r * x0)


def test_q_sample_per_row_steps_and_range():
    s = _schedule(10)
    x0 = torch.randn(3, 4, dtype=torch.float64)
    eps = torch.randn(3, 4, dtype=torch.float64)
    rows = q_sample(s, x0, np.array([1, 5, 10]), eps)
    for i, t in enumerate([1, 5, 10]):
        assert torch.allclose(rows[i], q_sample(s, x0[i], t, eps[i]))
    with pytest.raises(IndexError):
        q_sample(s, x0, 0, eps)
    with pytest.raises(IndexError):
        q_sample(s, x0, 11, eps)


@pytest.mark.parametrize("T", [1, 10, 30])
def test_forward_moments_monte_carlo(T):
    s = _schedule(T)
    gen = torch.Generator().manual_seed(T)
    n = 100_000
    x0 = torch.tensor([1.5, -0.5, 0.0, 3.0], dtype=torch.float64)
    for t in sorted({1, (T + 1) // 2, T}):
        eps = torch.randn(n, 4, generator=gen, dtype=torch.float64)
        xt = q_sample(s, x0.expand(n, 4), t, eps)
        ab = s.alpha_bar[t]
        se = math.sqrt((1 - ab) / n)
        assert (xt.mean(0) - math.sqrt(ab) * x0).abs().max() < 4 * se
        assert ((xt.var(0) / (1 - ab)) - 1).abs().max() < 0.05


def test_time_embedding_values():
    e = time_embedding(0, 8)
    assert torch.equal(e[:4], torch.zeros(4)) and torch.equal(e[4:], torch.ones(4))
    a = time_embedding(torch.arange(1, 31), 16, dtype=torch.float64)
    assert a.abs().max() <= 1
    assert len({tuple(r.tolist()) for r in a}) == 30
    assert torch.equal(time_embedding(7, 16), time_embedding(7, 16))
    with pytest.raises(ConfigError):
        time_embedding(1, 7)


def test_posterior_coefficients_pinned():
    s = make_schedule(2, 0.1, 0.1)
    c_x0, c_xt = posterior_coefficients(s, 2)
    # sqrt(0.9) * 0.1 / 0.19 and sqrt(0.9) * (1 - 0.9) / 0.19
    assert c_x0 == pytest.approx(0.4993069989739546, abs=1e-15)
    assert c_xt == pytest.approx(0.4993069989739546, abs=1e-15)
    # t = 1: all weight on x0_hat
    assert posterior_coefficients(s, 1) == pytest.approx((1.0, 0.0))


def test_coefficient_sum_identity():
    s = _schedule(30)
    for t in range(2, 31):
        c_x0, c_xt = posterior_coefficients(s, t)
        ab, abp, b = s.alpha_bar[t], s.alpha_bar[t - 1], s.beta[t]
        want = (math.sqrt(abp) * b + math.sqrt(1 - b) * (1 - abp)) / (1 - ab)
        assert c_x0 + c_xt == pytest.approx(want, rel=1e-12)


def test_step_one_is_deterministic():
    s = _schedule(10)
    x = torch.randn(2, 3, dtype=torch.float64)
    x0_hat = torch.randn(2, 3, dtype=torch.float64)
    a = posterior_step(s, x, x0_hat, 1, torch.randn(2, 3, dtype=torch.float64))
    b = posterior_step(s, x, x0_hat, 1, torch.zeros(2, 3, dtype=torch.float64))
    assert torch.equal(a, b)
    assert torch.allclose(a, x0_hat)


class _Stub(nn.Module):
    def __init__(self, fn, D=4, time_dim=4, text_dim=4):
        super().__init__()
        self.fn = fn
        self.config = DenoiserConfig(feature_dim=D, time_embed_dim=time_dim, text_embed_dim=text_dim, hidden=(4,))

    def forward(self, x_t, E_t, E_f):
        return self.fn(x_t)


def test_oracle_denoiser_recovers_x0_without_noise():
    s = _schedule(30)
    x0 = torch.randn(5, 4, dtype=torch.float64)
    x = q_sample(s, x0, 30, torch.randn(5, 4, dtype=torch.float64))
    E_f = torch.zeros(5, 4, dtype=torch.float64)
    oracle = _Stub(lambda xt: x0)
    for t in range(30, 0, -1):
        x = posterior_step(s, x, denoise_predict(oracle, x, t, E_f), t, torch.zeros_like(x))
    assert torch.allclose(x, x0, atol=1e-10)


def test_identity_stub_chain_statistics():
    """With f(x_t) = x_t the chain is linear Gaussian: v_{t-1} = a_t^2 v_t + var_t."""
    T = 10
    s = _schedule(T)
    n = 100_000
    x = torch.randn(n, 2, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    out = sample(_Stub(lambda xt: xt, D=2), s, x, T, torch.zeros(n, 4, dtype=torch.float64), rng_seed=1)
    v = 1.0
    for t in range(T, 0, -1):
        a = sum(posterior_coefficients(s, t))
        v = a * a * v + s.posterior_var[t]
    assert out.mean().abs() < 4 * math.sqrt(v / (2 * n))
    assert float(out.var()) == pytest.approx(v, rel=0.02)
    again = sample(_Stub(lambda xt: xt, D=2), s, x, T, torch.zeros(n, 4, dtype=torch.float64), rng_seed=1)
    assert torch.equal(out, again)


def _denoiser(D=4, seed=0, dtype=torch.float64):
    return Denoiser(DenoiserConfig(feature_dim=D, time_embed_dim=4, text_embed_dim=6, hidden=(8, 5),
                                   init_seed=seed), dtype=dtype)


def test_denoiser_shapes_and_determinism():
    d = _denoiser()
    x = torch.randn(4, dtype=torch.float64)
    E_f = torch.randn(6, dtype=torch.float64)
    out = denoise_predict(d, x, 3, E_f)
    assert out.shape == (4,)
    assert torch.equal(out, denoise_predict(d, x, 3, E_f))
    xb = torch.randn(3, 4, dtype=torch.float64)
    assert denoise_predict(d, xb, np.array([1, 2, 3]), torch.randn(3, 6, dtype=torch.float64)).shape == (3, 4)
    with pytest.raises(ShapeError):
        denoise_predict(d, torch.randn(3, 5, dtype=torch.float64), 1, torch.randn(3, 6, dtype=torch.float64))
    with pytest.raises(ShapeError):
        denoise_predict(d, xb, 1, torch.randn(3, 5, dtype=torch.float64))


def test_denoiser_seeded_init():
    a, b = _denoiser(seed=2), _denoiser(seed=2)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), _denoiser(seed=3).parameters()))


def test_denoiser_input_skip():
    d = _denoiser()
    x = torch.randn(3, 4, dtype=torch.float64)
    E_f = torch.randn(3, 6, dtype=torch.float64)
    # the gate starts closed
    assert torch.count_nonzero(d.skip_gate.weight) == 0 and torch.count_nonzero(d.skip_gate.bias) == 0
    with torch.no_grad():
        d.out.weight.zero_()
        d.out.bias.zero_()
        d.skip_gate.bias.fill_(1.0)
    assert torch.equal(denoise_predict(d, x, np.array([1, 7, 30]), E_f), x)


def test_denoiser_gradient_matches_finite_differences():
    torch.manual_seed(0)
    d = _denoiser(seed=1)
    with torch.no_grad():
        for p in d.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = torch.randn(3, 4, dtype=torch.float64)
    E_f = torch.randn(3, 6, dtype=torch.float64)
    target = torch.randn(3, 4, dtype=torch.float64)

    def loss():
        out = denoise_predict(d, x, np.array([1, 4, 9]), E_f)
        return 0.5 * (out - target).pow(2).sum(-1).mean()

    assert_grad_matches(loss, list(d.parameters()), n_probe=3)


def test_sample_seeded_and_one_step():
    d = _denoiser()
    s = _schedule(5)
    x = torch.randn(2, 4, dtype=torch.float64)
    E_f = torch.randn(2, 6, dtype=torch.float64)
    assert torch.equal(sample(d, s, x, 5, E_f, 3), sample(d, s, x, 5, E_f, 3))
    assert not torch.equal(sample(d, s, x, 5, E_f, 3), sample(d, s, x, 5, E_f, 4))
    # one step: output is the prediction itself whatever the seed
    assert torch.equal(sample(d, s, x, 1, E_f, 0), sample(d, s, x, 1, E_f, 9))
    assert torch.allclose(sample(d, s, x, 1, E_f, 0), denoise_predict(d, x, 1, E_f))
    with pytest.raises(IndexError):
        sample(d, s, x, 6, E_f, 0)
