import math

import numpy as np
import pytest
import torch

from anymotion.diffusion import (
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    ddim_step,
    inference_timesteps,
    make_schedule,
    q_sample,
    q_sample_batch,
    sample_loop,
)
from anymotion.errors import ValidationError


class TestSchedule:
    def test_cosine_1000(self):
        s = make_schedule(1000, "cosine")
        assert s.abar(1) > 0.99
        assert s.abar(1000) < 0.01
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_linear_1000_endpoint(self):
        s = make_schedule(1000, "linear")
        assert s.abar(1000) < 0.01

    def test_linear_10_product_oracle(self):
        # oracle: independent product loop over the betas
        s = make_schedule(10, "linear")
        betas = np.linspace(1e-4, 0.02, 10)
        prod = 1.0
        expected = []
        for b in betas:
            prod *= 1.0 - b
            expected.append(prod)
        assert np.allclose(s.alpha_bar, expected, atol=1e-12)
        assert np.allclose(s.beta, betas)

    def test_too_short(self):
        with pytest.raises(ValidationError):
            make_schedule(1, "cosine")

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            make_schedule(100, "quadratic")

    def test_abar_zero_convention(self):
        assert make_schedule(10, "linear").abar(0) == 1.0


def _two_step_quarter_schedule() -> NoiseSchedule:
    # beta = (0.5, 0.5) gives abar = (0.5, 0.25)
    beta = np.array([0.5, 0.5])
    return NoiseSchedule(2, beta, np.cumprod(1 - beta))


class TestQSample:
    def test_zero_noise(self):
        s = make_schedule(10, "linear")
        x0 = np.array([1.0, -2.0])
        for t in (1, 5, 10):
            assert np.allclose(q_sample(x0, t, np.zeros(2), s),
                               math.sqrt(s.abar(t)) * x0)

    def test_forced_arithmetic(self):
        s = _two_step_quarter_schedule()
        got = q_sample(np.array([2.0]), 2, np.array([1.0]), s)
        assert abs(got[0] - (1.0 + math.sqrt(0.75))) < 1e-12

    def test_t_out_of_range(self):
        s = make_schedule(10, "linear")
        with pytest.raises(ValidationError):
            q_sample(np.zeros(1), 11, np.zeros(1), s)
        with pytest.raises(ValidationError):
            q_sample(np.zeros(1), 0, np.zeros(1), s)

    def test_iterated_kernel_matches_closed_form(self):
        # oracle: brute-force composition of the one-step kernel over T=10.
        # With all noises zero the iterate must equal sqrt(abar_t) x0, and the
        # accumulated noise coefficients must give variance 1 - abar_t.
        s = make_schedule(10, "linear")
        x0 = 1.7
        x = x0
        noise_sq = 0.0
        for t in range(1, 11):
            b = s.beta[t - 1]
            x = math.sqrt(1 - b) * x
            noise_sq = (1 - b) * noise_sq + b
            assert abs(x - q_sample(np.array([x0]), t, np.zeros(1), s)[0]) < 1e-5
            assert abs(noise_sq - (1 - s.abar(t))) < 1e-5

    def test_empirical_variance(self):
        s = make_schedule(100, "cosine")
        gen = torch.Generator().manual_seed(0)
        eps = torch.randn(100_000, generator=gen, dtype=torch.float64)
        for t in (10, 50, 100):
            xt = q_sample(torch.zeros_like(eps), t, eps, s)
            var = float(xt.var())
            assert abs(var - (1 - s.abar(t))) < 0.03 * (1 - s.abar(t))

    def test_batched_matches_scalar(self):
        s = make_schedule(50, "cosine")
        x0 = torch.randn(4, 3, 2, generator=torch.Generator().manual_seed(1))
        eps = torch.randn(4, 3, 2, generator=torch.Generator().manual_seed(2))
        t = torch.tensor([1, 10, 25, 50])
        batched = q_sample_batch(x0, t, eps, s)
        for i, ti in enumerate(t.tolist()):
            assert torch.allclose(batched[i], q_sample(x0[i], ti, eps[i], s))


class TestCfg:
    def test_w0_returns_uncond(self):
        u, c = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        assert np.array_equal(cfg_combine(u, c, 0.0), u)

    def test_w1_returns_cond(self):
        u, c = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        assert np.array_equal(cfg_combine(u, c, 1.0), c)

    def test_w2_arithmetic(self):
        assert cfg_combine(np.zeros(1), np.ones(1), 2.0)[0] == 2.0

    def test_affine_in_w(self):
        rng = np.random.default_rng(5)
        u, c = rng.normal(size=8), rng.normal(size=8)
        w = np.array([0.3, 1.1, 2.7])
        outs = [cfg_combine(u, c, wi) for wi in w]
        # second difference of an affine function vanishes
        lhs = (outs[2] - outs[1]) / (w[2] - w[1])
        rhs = (outs[1] - outs[0]) / (w[1] - w[0])
        assert np.allclose(lhs, rhs, atol=1e-12)


class TestDdimStep:
    def test_final_step_returns_x0(self):
        s = make_schedule(100, "cosine")
        x0 = np.array([0.4, -1.2])
        xt = q_sample(x0, 1, np.array([0.3, 0.7]), s)
        assert np.allclose(ddim_step(xt, x0, 1, 0, s), x0, atol=1e-12)

    def test_zero_eps_scaling(self):
        s = make_schedule(100, "cosine")
        xt = np.array([2.0])
        t, tp = 60, 30
        x0_hat = xt / math.sqrt(s.abar(t))
        got = ddim_step(xt, x0_hat, t, tp, s)
        assert np.allclose(got, math.sqrt(s.abar(tp) / s.abar(t)) * xt)

    def test_order_validation(self):
        s = make_schedule(100, "cosine")
        with pytest.raises(ValidationError):
            ddim_step(np.zeros(1), np.zeros(1), 10, 10, s)

    def test_perfect_denoiser_recovers_x0(self):
        s = make_schedule(50, "cosine")
        gen = torch.Generator().manual_seed(3)
        x0 = torch.randn(4, generator=gen, dtype=torch.float64)
        x = torch.randn(4, generator=gen, dtype=torch.float64)
        for t in range(50, 0, -1):
            x = ddim_step(x, x0, t, t - 1, s)
        assert float((x - x0).abs().max()) < 1e-5

    def test_matches_ancestral_sampler_mean(self):
        # oracle: 1000-step ancestral sampling with the analytic posterior-mean
        # denoiser of x0 ~ N(m, s0^2); 50-step DDIM must land on the same mean
        # within 2%.
        m, s0 = 2.0, 0.5
        big = make_schedule(1000, "cosine")

        def denoise(x, t):
            a = big.abar(t)
            return m + math.sqrt(a) * s0**2 * (x - math.sqrt(a) * m) / (
                a * s0**2 + 1 - a
            )

        n = 4000
        gen = torch.Generator().manual_seed(7)
        x = torch.randn(n, generator=gen, dtype=torch.float64)
        for t in range(1000, 0, -1):
            x0_hat = denoise(x, t)
            a_t, a_p = big.abar(t), big.abar(t - 1)
            beta = float(big.beta[t - 1])
            if t == 1:
                x = x0_hat
                continue
            mean = (
                math.sqrt(a_p) * beta * x0_hat
                + math.sqrt(1 - beta) * (1 - a_p) * x
            ) / (1 - a_t)
            sigma = math.sqrt((1 - a_p) / (1 - a_t) * beta)
            x = mean + sigma * torch.randn(n, generator=gen, dtype=torch.float64)
        ancestral_mean = float(x.mean())

        cfg = SamplerConfig(num_inference_steps=50, guidance_scale=1.0)
        out = sample_loop(lambda xt, t: denoise(xt, t), (n,), cfg, big, seed=9,
                          dtype=torch.float64)
        ddim_mean = float(out.mean())
        assert abs(ddim_mean - ancestral_mean) / abs(m) < 0.02


class TestSampleLoop:
    def test_constant_denoiser(self):
        s = make_schedule(100, "cosine")
        c = torch.full((2, 3), 5.0)
        out = sample_loop(lambda x, t: c.to(x.dtype), (2, 3),
                          SamplerConfig(num_inference_steps=10), s, seed=0)
        assert torch.allclose(out, c)

    def test_same_seed_reproducible(self):
        s = make_schedule(100, "cosine")

        def dn(x, t):
            return 0.5 * x

        cfg = SamplerConfig(num_inference_steps=25)
        a = sample_loop(dn, (4, 5), cfg, s, seed=42)
        b = sample_loop(dn, (4, 5), cfg, s, seed=42)
        assert torch.equal(a, b)

    def test_zero_hook_is_identity(self):
        s = make_schedule(100, "cosine")

        def dn(x, t):
            return 0.5 * x

        plain = sample_loop(dn, (3,), SamplerConfig(num_inference_steps=10), s, 1)
        hooked = sample_loop(
            dn, (3,),
            SamplerConfig(num_inference_steps=10, guidance_hooks=[lambda x, t: x + 0.0]),
            s, 1,
        )
        assert torch.equal(plain, hooked)

    def test_timesteps_cover_range(self):
        ts = inference_timesteps(1000, 50)
        assert ts[0] == 1000 and ts[-1] == 0 and len(ts) == 51
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_steps_cannot_exceed_total(self):
        with pytest.raises(ValidationError):
            inference_timesteps(10, 20)


class TestSamplerConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            SamplerConfig(num_inference_steps=0)
        with pytest.raises(ValidationError):
            SamplerConfig(eta=1.5)
        with pytest.raises(ValidationError):
            SamplerConfig(guidance_scale=-1.0)
