import math

import numpy as np
import pytest
import torch

from diffpretrain.diffusion import (
    ddpm_loss, make_schedule, p_step, predict_x0, q_sample, sample, sample_timesteps, scaled_beta_range,
)
from diffpretrain.errors import ConditioningError, ScheduleError, ShapeMismatchError
from diffpretrain.utils.seeding import make_generator


class ExactNoise:
    """Epsilon model that returns a fixed noise tensor."""

    in_channels = None

    def __init__(self, eps):
        self.eps = eps

    def __call__(self, x_t, t, cond=None):
        return self.eps


class ZeroNoise:
    def __init__(self, in_channels=None):
        self.in_channels = in_channels

    def __call__(self, x_t, t, cond=None):
        return torch.zeros_like(x_t)


class TestSchedule:
    def test_linear_betas_and_cumulative_products(self):
        sched = make_schedule(100, 1e-3, 0.2)
        np.testing.assert_allclose(sched.beta[[0, -1]], [1e-3, 0.2], rtol=1e-12)
        np.testing.assert_allclose(np.diff(sched.beta), np.full(99, (0.2 - 1e-3) / 99), rtol=1e-9)
        np.testing.assert_allclose(sched.alpha, 1.0 - sched.beta, rtol=1e-12)
        np.testing.assert_allclose(sched.alpha_bar, np.cumprod(1.0 - sched.beta), rtol=1e-12)
        np.testing.assert_allclose(sched.sigma ** 2, sched.beta, rtol=1e-12)
        assert (np.diff(sched.alpha_bar) < 0).all()
        assert 0.0 < sched.alpha_bar[-1] < sched.alpha_bar[0] < 1.0

    def test_reference_range_rescales_with_T(self):
        assert scaled_beta_range(1000) == pytest.approx((1e-4, 0.02))
        assert scaled_beta_range(100) == pytest.approx((1e-3, 0.2))
        with pytest.raises(ScheduleError):
            scaled_beta_range(10)

    @pytest.mark.parametrize("args", [(0, 1e-3, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 1e-3, 1.0)])
    def test_invalid_parameters(self, args):
        with pytest.raises(ScheduleError):
            make_schedule(*args)

    @pytest.mark.parametrize("t", [0, 101])
    def test_steps_outside_range(self, t):
        sched = make_schedule(100, 1e-3, 0.2)
        with pytest.raises(ScheduleError):
            sched.check_step(t)
        with pytest.raises(ScheduleError):
            q_sample(torch.zeros(2), t, torch.zeros(2), sched)

    def test_sampled_timesteps_cover_one_to_T(self):
        sched = make_schedule(5, 1e-3, 0.2)
        t = sample_timesteps(2000, sched, make_generator(0))
        assert t.min().item() == 1 and t.max().item() == 5


class TestForwardProcess:
    @pytest.mark.parametrize("t", [1, 50, 100])
    def test_monte_carlo_moments(self, t):
        sched = make_schedule(100, 1e-3, 0.2)
        n = 10_000
        x0 = torch.full((n,), 0.7, dtype=torch.float64)
        eps = torch.randn(n, generator=make_generator(t), dtype=torch.float64)
        x_t = q_sample(x0, t, eps, sched)

        alpha_bar = sched.alpha_bar[t - 1]
        variance = 1.0 - alpha_bar
        mean_se = math.sqrt(variance / n)
        var_se = variance * math.sqrt(2.0 / (n - 1))
        assert abs(x_t.mean().item() - math.sqrt(alpha_bar) * 0.7) < 3 * mean_se
        assert abs(x_t.var().item() - variance) < 3 * var_se

    def test_batched_steps_broadcast_per_sample(self):
        sched = make_schedule(10, 1e-3, 0.2)
        x0 = torch.ones(2, 1, 2, 2, 2, dtype=torch.float64)
        out = q_sample(x0, torch.tensor([1, 10]), torch.zeros_like(x0), sched)
        assert out[0].unique().item() == pytest.approx(math.sqrt(sched.alpha_bar[0]))
        assert out[1].unique().item() == pytest.approx(math.sqrt(sched.alpha_bar[9]))

    def test_noise_shape_must_match(self):
        sched = make_schedule(10, 1e-3, 0.2)
        with pytest.raises(ShapeMismatchError):
            q_sample(torch.zeros(2, 3), 1, torch.zeros(3, 2), sched)


class TestReverseProcess:
    @pytest.mark.parametrize("t", [1, 7, 20])
    def test_exact_noise_recovers_x0(self, t):
        sched = make_schedule(20, 1e-3, 0.2)
        generator = make_generator(1)
        x0 = torch.randn(2, 1, 3, 3, 3, generator=generator, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64)
        x_t = q_sample(x0, t, eps, sched)
        torch.testing.assert_close(predict_x0(x_t, t, eps, sched), x0, rtol=0, atol=1e-5)

    def test_last_reverse_step_inverts_q_sample(self):
        sched = make_schedule(20, 1e-3, 0.2)
        generator = make_generator(2)
        x0 = torch.randn(1, 1, 4, 4, 4, generator=generator, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64)
        x_1 = q_sample(x0, 1, eps, sched)
        torch.testing.assert_close(p_step(ExactNoise(eps), x_1, 1, None, sched), x0, rtol=0, atol=1e-5)

    def test_deterministic_step_is_the_posterior_mean(self):
        sched = make_schedule(20, 1e-3, 0.2)
        x_t = torch.ones(1, 1, 2, 2, 2, dtype=torch.float64)
        out = p_step(ZeroNoise(), x_t, 5, None, sched, stochastic=False)
        torch.testing.assert_close(out, x_t / math.sqrt(sched.alpha[4]))

    def test_sampling_is_seeded(self):
        sched = make_schedule(5, 1e-3, 0.2)
        a = sample(ZeroNoise(), (2, 4, 4), None, sched, make_generator(3))
        b = sample(ZeroNoise(), (2, 4, 4), None, sched, make_generator(3))
        assert a.shape == (1, 1, 2, 4, 4)
        torch.testing.assert_close(a, b)


class TestLoss:
    def test_perfect_model_has_zero_loss(self):
        sched = make_schedule(10, 1e-3, 0.2)
        x0 = torch.zeros(1, 1, 2, 2, 2)
        eps = torch.randn(x0.shape, generator=make_generator(4))

        loss = ddpm_loss(ExactNoise(eps), x0, 3, None, sched, make_generator(4))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_model_loss_is_the_noise_energy(self):
        sched = make_schedule(10, 1e-3, 0.2)
        x0 = torch.randn(2, 1, 16, 16, 16, generator=make_generator(1))
        loss = ddpm_loss(ZeroNoise(), x0, 5, None, sched, make_generator(9))
        eps = torch.randn(x0.shape, generator=make_generator(9))
        assert loss.item() == pytest.approx(eps.pow(2).mean().item(), rel=1e-6)
        assert loss.item() == pytest.approx(1.0, abs=0.1)

    def test_conditioning_must_match_input_channels(self):
        sched = make_schedule(10, 1e-3, 0.2)
        x0 = torch.zeros(1, 1, 2, 2, 2)
        with pytest.raises(ConditioningError, match="in_channels"):
            ddpm_loss(ZeroNoise(in_channels=2), x0, None, None, sched, make_generator(0))
        with pytest.raises(ConditioningError, match="in_channels"):
            ddpm_loss(ZeroNoise(in_channels=1), x0, None, torch.zeros_like(x0), sched, make_generator(0))
