import numpy as np
import pytest

from multicond import connector as cn
from multicond import diffusion as df
from multicond import numerics as nm
from multicond.numerics import RngState, Tensor


def schedule(t_max=100, beta_start=1e-4, beta_end=0.02):
    return df.build_schedule(df.DiffusionConfig(
        t_max=t_max, beta_start=beta_start, beta_end=beta_end))


class TestSchedule:
    def test_direct_product(self):
        sched = schedule(t_max=2, beta_start=0.5, beta_end=0.5)
        assert np.allclose(sched.alpha_bars, [0.5, 0.25], atol=1e-15)

    def test_default_alpha_bars_monotone(self):
        sched = schedule()
        assert np.all(np.diff(sched.alpha_bars) < 0.0)
        assert abs(sched.alpha_bars[0] - (1.0 - sched.betas[0])) < 1e-15

    def test_against_log_domain_oracle(self):
        sched = schedule()
        log_product = np.exp(np.sum(np.log1p(-sched.betas)))
        rel = abs(sched.alpha_bars[-1] - log_product) / log_product
        assert rel < 1e-12

    def test_rejects_bad_betas(self):
        with pytest.raises(df.DiffusionError):
            schedule(beta_start=0.0)
        with pytest.raises(df.DiffusionError):
            schedule(beta_start=0.5, beta_end=0.2)

    def test_run_config_invariants(self):
        with pytest.raises(df.DiffusionError):
            df.DiffusionConfig(t_max=5).validate()
        with pytest.raises(df.DiffusionError):
            df.DiffusionConfig(beta_start=0.02, beta_end=0.02).validate()


class TestQSample:
    def test_zero_noise(self):
        sched = schedule()
        x0 = np.array([[1.0, -2.0]])
        got = df.q_sample(x0, 10, np.zeros_like(x0), sched)
        assert np.allclose(got, np.sqrt(sched.alpha_bars[10]) * x0, atol=1e-15)

    def test_small_t_limit(self):
        sched = schedule(beta_start=1e-8, beta_end=0.02)
        x0 = np.array([[1.0, 2.0]])
        noise = np.array([[0.3, -0.4]])
        got = df.q_sample(x0, 0, noise, sched)
        assert np.max(np.abs(got - x0)) < np.sqrt(1e-8) * np.linalg.norm(noise)

    def test_monte_carlo_mean(self):
        sched = schedule()
        rng = RngState(3)
        x0 = np.array([0.7, -1.1])
        draws = np.stack([df.q_sample(x0, 50, rng.normal(2), sched) for _ in range(10_000)])
        assert np.max(np.abs(draws.mean(axis=0) - np.sqrt(sched.alpha_bars[50]) * x0)) < 0.05

    def test_t_out_of_range(self):
        sched = schedule()
        with pytest.raises(df.DiffusionError):
            df.q_sample(np.zeros(2), 100, np.zeros(2), sched)


class TestPosterior:
    def test_x0_reconstruction_identity(self):
        sched = schedule()
        rng = RngState(4)
        x0 = rng.normal((3, 2))
        noise = rng.normal((3, 2))
        t = 40
        x_t = df.q_sample(x0, t, noise, sched)
        assert np.max(np.abs(df.predict_x0(x_t, t, noise, sched) - x0)) < 1e-10

    def test_t_zero_is_deterministic(self):
        sched = schedule()
        x = np.array([[0.5, 0.5]])
        eps = np.array([[0.1, -0.1]])
        a = df.posterior_step(x, 0, eps, sched, noise=np.ones_like(x))
        b = df.posterior_step(x, 0, eps, sched, noise=None)
        assert np.array_equal(a, b)

    def test_oracle_chain_inverts_to_x0(self):
        sched = schedule(t_max=50, beta_start=2e-3, beta_end=0.12)
        rng = RngState(5)
        x0 = rng.normal((4, 2))
        x = rng.normal((4, 2))  # arbitrary start
        for t in range(sched.t_max - 1, -1, -1):
            abar = sched.alpha_bars[t]
            eps_oracle = (x - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)
            x = df.posterior_step(x, t, eps_oracle, sched, noise=None)
        assert np.max(np.abs(x - x0)) < 1e-6


class TestGuidance:
    def test_w_one_returns_conditional(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, -1.0])
        assert np.array_equal(df.cfg_combine(a, b, 1.0), b)

    def test_w_zero_returns_unconditional(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, -1.0])
        assert np.array_equal(df.cfg_combine(a, b, 0.0), a)

    def test_equal_inputs_any_weight(self):
        a = np.array([0.3, 0.4])
        for w in (0.0, 1.0, 7.5, -2.0):
            assert np.array_equal(df.cfg_combine(a, a.copy(), w), a)

    def test_affine_in_weight(self):
        rng = RngState(6)
        a, b = rng.normal(4), rng.normal(4)
        w1, w2 = 0.7, 2.9
        lhs = df.cfg_combine(a, b, w1) + df.cfg_combine(a, b, w2)
        rhs = 2.0 * df.cfg_combine(a, b, (w1 + w2) / 2.0)
        assert np.max(np.abs(lhs - rhs)) < 1e-12


class TestDenoiser:
    def make(self, rng):
        cfg = df.DiffusionConfig(t_max=20, beta_start=2e-3, beta_end=0.12,
                                 denoiser_hidden=8)
        p = df.init_denoiser(cfg, d_model=6, d_time=4, rng=rng)
        return cfg, p

    def test_output_shape_matches_input(self):
        rng = RngState(7)
        cfg, p = self.make(rng)
        tokens = Tensor(rng.normal((3, 6)))
        out = df.denoiser_forward(p, rng.normal((5, 2)), cn.time_embed(3, 4), tokens)
        assert out.data.shape == (5, 2)

    def test_gradients_match_finite_differences(self):
        rng = RngState(8)
        cfg, p = self.make(rng)
        p.w2.data = np.asarray(0.3 * rng.normal(p.w2.data.shape))
        x_t = rng.normal((2, 2))
        target = rng.normal((2, 2))
        te = cn.time_embed(5, 4)
        params = {"tokens": Tensor(rng.normal((3, 6)), requires_grad=True),
                  "w_in": p.w_in, "wq": p.wq, "wk": p.wk, "wv": p.wv,
                  "wo": p.wo, "w1": p.w1, "w2": p.w2, "b2": p.b2}

        def loss(q):
            out = df.denoiser_forward(p, x_t, te, q["tokens"])
            diff = out - Tensor(target)
            return nm.mean(diff * diff)

        report = nm.grad_check(loss, params)
        assert report.max_rel_err < 1e-4
        assert np.max(np.abs(params["tokens"].grad)) > 0.0

    def test_denoise_step_uses_estimate(self):
        rng = RngState(9)
        cfg, p = self.make(rng)
        sched = df.build_schedule(cfg)
        tokens = Tensor(rng.normal((3, 6)))
        x_t = rng.normal((4, 2))
        out = df.denoise_step(x_t, 5, tokens, p, sched, d_time=4, noise=None)
        eps = df.denoiser_forward(p, x_t, cn.time_embed(5, 4), tokens).data
        assert np.array_equal(out, df.posterior_step(x_t, 5, eps, sched, noise=None))


class _StubModel:
    """Minimal duck-typed model: tokens depend on the timestep and a label."""

    def __init__(self, rng):
        self.d_time = 4
        self.denoiser = df.init_denoiser(
            df.DiffusionConfig(denoiser_hidden=8), d_model=6, d_time=4, rng=rng)
        self.denoiser.w2.data = np.asarray(0.1 * rng.normal(self.denoiser.w2.data.shape))
        self._base = rng.normal((3, 6))

    def condition_tokens(self, cond, t):
        return Tensor(self._base + 0.1 * cond + 0.01 * t)

    def null_tokens(self, t):
        return Tensor(self._base + 0.01 * t)


class TestSampling:
    def test_fixed_seed_bit_identical(self):
        cfg = df.DiffusionConfig(t_max=12, beta_start=2e-3, beta_end=0.2)
        model = _StubModel(RngState(10))
        a = df.sample(model, [0.0, 1.0], 6, cfg, RngState(42), guidance=2.0)
        b = df.sample(model, [0.0, 1.0], 6, cfg, RngState(42), guidance=2.0)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_zero_samples_empty_batch(self):
        cfg = df.DiffusionConfig(t_max=12, beta_start=2e-3, beta_end=0.2)
        model = _StubModel(RngState(11))
        out = df.sample(model, [0.0], 0, cfg, RngState(0))
        assert out[0].shape == (0, 2)

    def test_tokens_vary_across_timesteps(self):
        model = _StubModel(RngState(12))
        t_low = model.condition_tokens(0.0, 1).data
        t_high = model.condition_tokens(0.0, 9).data
        assert np.max(np.abs(t_low - t_high)) > 0.0
