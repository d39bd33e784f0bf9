import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cife.backbone.unet import init_unet
from cife.diffusion import (
    SamplerConfig, add_noise, ddim_sample, ddim_step, default_schedule, diffusion_loss, make_schedule,
    timestep_subsequence,
)

from conftest import perturbed

SCHED = default_schedule()


def _alpha_bar_oracle(T, lo, hi):
    # plain-python cumulative product in log space
    total = 0.0
    for i in range(T):
        beta = lo + (hi - lo) * i / (T - 1)
        total += math.log1p(-beta)
    return math.exp(total)


def test_single_step_schedule():
    s = make_schedule(1, 0.1, 0.1)
    assert s.alpha_bars.tolist() == pytest.approx([0.9])


def test_thousand_step_alpha_bar():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bars[-1] == pytest.approx(_alpha_bar_oracle(1000, 1e-4, 0.02), rel=1e-9)
    assert s.alpha_bars[-1] == pytest.approx(4.0e-5, rel=0.02)


@pytest.mark.parametrize("T", [2, 50, 200, 1000])
def test_schedule_monotone_and_unit_norm(T):
    s = make_schedule(T, 1e-4 * 1000 / T, min(0.02 * 1000 / T, 0.5))
    assert np.all(np.diff(s.betas) > 0)
    assert np.all(np.diff(s.alpha_bars) < 0)
    np.testing.assert_allclose(np.sqrt(s.alpha_bars) ** 2 + np.sqrt(1 - s.alpha_bars) ** 2, 1.0, atol=1e-7)


@pytest.mark.parametrize("bounds", [(0.0, 0.02), (0.02, 0.01), (0.1, 1.0)])
def test_schedule_rejects_bad_bounds(bounds):
    with pytest.raises(ValueError):
        make_schedule(10, *bounds)


def test_default_schedule_is_rescaled():
    assert SCHED.T == 200
    assert SCHED.betas[0] == pytest.approx(5e-4)
    assert SCHED.betas[-1] == pytest.approx(0.1)


def test_add_noise_cases():
    x0 = np.random.default_rng(0).standard_normal((2, 4, 8, 8))
    np.testing.assert_allclose(add_noise(x0, np.zeros_like(x0), 50, SCHED), np.sqrt(SCHED.alpha_bars[50]) * x0)
    tiny = make_schedule(10, 1e-8, 1e-7)
    eps = np.random.default_rng(1).standard_normal(x0.shape)
    assert np.abs(add_noise(x0, eps, 0, tiny) - x0).max() < 1e-3
    with pytest.raises(ValueError):
        add_noise(x0, eps, 200, SCHED)
    with pytest.raises(ValueError):
        add_noise(x0, eps[:1], 3, SCHED)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 199), st.integers(0, 2 ** 31))
def test_add_noise_round_trip(t, seed):
    g = np.random.default_rng(seed)
    x0, eps = g.standard_normal((2, 4, 8, 8)), g.standard_normal((2, 4, 8, 8))
    ab = SCHED.alpha_bars[t]
    back = (add_noise(x0, eps, t, SCHED) - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    assert np.abs(back - x0).max() <= 1e-5


def test_per_sample_timesteps():
    x0 = np.ones((2, 4, 8, 8))
    out = add_noise(x0, np.zeros_like(x0), np.array([0, 199]), SCHED)
    assert out[0, 0, 0, 0] == pytest.approx(np.sqrt(SCHED.alpha_bars[0]))
    assert out[1, 0, 0, 0] == pytest.approx(np.sqrt(SCHED.alpha_bars[199]))


def test_timestep_subsequence():
    assert timestep_subsequence(200, 200).tolist() == list(range(199, -1, -1))
    assert timestep_subsequence(200, 1).tolist() == [199]
    seq = timestep_subsequence(200, 20)
    assert len(seq) == 20 and seq[0] == 199 and seq[-1] == 0
    gaps = -np.diff(seq)
    assert np.all(gaps > 0)
    assert gaps.max() - gaps.min() <= 1
    with pytest.raises(ValueError):
        timestep_subsequence(200, 201)


def test_sampler_config_validation():
    SamplerConfig(steps=30, seed=7313187166)
    for bad in (dict(steps=0), dict(eta=-0.1), dict(seed=-1), dict(seed=2 ** 64)):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)
    with pytest.raises(ValueError):
        ddim_sample(np.zeros((1, 16, 64)), SamplerConfig(steps=201), init_unet(0), SCHED)


def _oracle_model(x0):
    """Noise predictor that knows the clean latent: eps = (x_t - sqrt(ab) x0) / sqrt(1 - ab)."""
    def eps_model(x_t, t):
        ab = SCHED.alpha_bars[t]
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
    return eps_model


def test_single_step_recovers_x0():
    g = np.random.default_rng(3)
    x0, eps = g.standard_normal((1, 4, 8, 8)), g.standard_normal((1, 4, 8, 8))
    x_t = add_noise(x0, eps, 120, SCHED)
    out = ddim_step(x_t, eps, 120, -1, SCHED)
    assert np.abs(out - x0).max() <= 1e-5


@pytest.mark.parametrize("steps", [1, 5, 20])
def test_ddim_with_perfect_predictor(steps):
    x0 = np.random.default_rng(4).standard_normal((2, 4, 8, 8))
    x_T = np.random.default_rng(5).standard_normal((2, 4, 8, 8))
    out = ddim_sample(None, SamplerConfig(steps=steps), None, SCHED, eps_model=_oracle_model(x0), x_T=x_T)
    assert np.abs(out - x0).max() <= 1e-4


def test_ddim_with_eta_still_reconstructs():
    x0 = np.random.default_rng(6).standard_normal((1, 4, 8, 8))
    x_T = np.random.default_rng(7).standard_normal((1, 4, 8, 8))
    out = ddim_sample(None, SamplerConfig(steps=10, eta=1.0, seed=3), None, SCHED,
                      eps_model=_oracle_model(x0), x_T=x_T)
    assert np.abs(out - x0).max() <= 1e-4


def test_ddim_determinism_and_seed_dependence():
    unet = perturbed(init_unet(0), 2)
    cond = np.random.default_rng(0).standard_normal((1, 16, 64)).astype(np.float32)
    a = ddim_sample(cond, SamplerConfig(steps=3, seed=11), unet, SCHED)
    b = ddim_sample(cond, SamplerConfig(steps=3, seed=11), unet, SCHED)
    c = ddim_sample(cond, SamplerConfig(steps=3, seed=12), unet, SCHED)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_diffusion_loss_at_init_is_about_one():
    g = np.random.default_rng(8)
    x0 = g.standard_normal((16, 4, 8, 8)).astype(np.float32)
    cond = g.standard_normal((16, 16, 64)).astype(np.float32)
    loss = float(diffusion_loss(x0, cond, g.integers(0, 200, 16), 3, init_unet(0), SCHED).data)
    assert 0.85 < loss < 1.15


def test_diffusion_loss_zero_for_exact_prediction(monkeypatch):
    import cife.diffusion as diffusion
    from cife.numerics import Tensor
    eps = np.random.default_rng(9).standard_normal((2, 4, 8, 8)).astype(np.float32)
    monkeypatch.setattr(diffusion, "unet_forward", lambda x, t, c, p: Tensor(eps))
    loss = diffusion_loss(np.zeros_like(eps), np.zeros((2, 16, 64)), 5, 0, {}, SCHED, eps=eps)
    assert float(loss.data) == 0.0
