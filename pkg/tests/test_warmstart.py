import numpy as np
import pytest

from helpers import central_diff_grads, dense_random_params, max_rel_error
from warmflow import nn, warmstart
from warmflow.fields import Field, ShapeError
from warmflow.warmstart import (
    Moments,
    blend_sigma,
    blend_sigma_array,
    make_moments,
    nll_loss,
    nll_loss_and_grad,
    normalise,
    predict_moments,
    sample_informed_prior,
    unnormalise,
)


class TestPredictMoments:
    def test_zero_network_gives_softplus_zero_sigma(self):
        spec = nn.MlpSpec(3, (4,), 2 * 5, activation="silu")
        params = np.zeros(nn.n_params(spec))
        m = predict_moments(spec, params, Field(np.ones(3)))
        np.testing.assert_array_equal(m.mu.data, np.zeros(5))
        np.testing.assert_allclose(m.sigma.data, np.log(2.0), rtol=1e-12)

    def test_clamp_engages_for_very_negative_head(self):
        mu, sigma = warmstart.moments_from_raw(np.array([0.0, -10.0]), sigma_min=0.01)
        assert sigma[0] == 0.01
        assert mu[0] == 0.0

    def test_moments_require_positive_sigma(self):
        with pytest.raises(ValueError):
            Moments(Field(np.zeros(2)), Field(np.array([1.0, 0.0])))


class TestNll:
    def test_closed_form_at_mean_unit_sigma(self):
        m = make_moments(np.zeros(2), np.ones(2))
        val = nll_loss(m, Field(np.zeros(2)))
        assert abs(val - np.log(2 * np.pi)) < 1e-12  # 0.5 * d * log(2*pi), d=2

    def test_doubling_sigma_adds_d_log_two(self):
        d = 7
        m1 = make_moments(np.zeros(d), np.ones(d))
        m2 = make_moments(np.zeros(d), 2 * np.ones(d))
        x = Field(np.zeros(d))
        assert abs((nll_loss(m2, x) - nll_loss(m1, x)) - d * np.log(2.0)) < 1e-12

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        raw = rng.standard_normal(8)
        x0 = rng.standard_normal(4)
        _, grad = nll_loss_and_grad(raw, x0)

        def loss(r):
            mu, sigma = warmstart.moments_from_raw(r)
            m = Moments(Field(mu), Field(sigma))
            return nll_loss(m, Field(x0))

        fd = central_diff_grads(loss, raw, h=1e-5)
        assert max_rel_error(grad.ravel(), fd) < 1e-4

    def test_clamped_entries_get_zero_gradient(self):
        raw = np.array([0.0, 0.0, -10.0, 1.0])  # first sigma head deeply clamped
        x0 = np.array([0.5, 0.5])
        _, grad = nll_loss_and_grad(raw, x0)
        assert grad[0, 2] == 0.0
        assert grad[0, 3] != 0.0

    def test_grad_through_network_matches_fd(self):
        # moment head on top of a small MLP, full chain checked against FD
        spec = nn.MlpSpec(3, (6,), 2 * 2, activation="tanh")
        assert nn.n_params(spec) <= 1000
        rng = np.random.default_rng(22)
        params = dense_random_params(spec, rng)
        ctx = rng.standard_normal((2, 3))
        x0 = rng.standard_normal((2, 2))

        raw, cache = nn.forward_batch(spec, params, ctx, want_cache=True)
        _, graw = nll_loss_and_grad(raw, x0)
        analytic = nn.backward_batch(spec, params, cache, graw)

        def loss(p):
            r, _ = nn.forward_batch(spec, p, ctx)
            val, _ = nll_loss_and_grad(r, x0)
            return val

        fd = central_diff_grads(loss, params, h=1e-4)
        assert max_rel_error(analytic, fd) < 1e-4


class TestBlend:
    def test_w0_gives_exact_ones(self):
        out = blend_sigma(Field(np.array([0.3, 5.0, 0.01])), 0.0)
        assert np.all(out.sigma_norm.data == 1.0)

    def test_w1_gives_exact_sigma(self):
        sigma = np.array([0.3, 5.0, 0.01])
        out = blend_sigma(Field(sigma), 1.0)
        assert np.array_equal(out.sigma_norm.data, sigma)

    def test_hand_value_at_half(self):
        out = blend_sigma(Field(np.array([0.2])), 0.5)
        assert out.sigma_norm.data[0] == 0.5 * max(0.2, 0.5) + 0.5  # = 0.75

    def test_rejects_warmth_outside_unit_interval(self):
        with pytest.raises(ValueError):
            blend_sigma(Field(np.ones(2)), 1.5)

    def test_monotone_nonincreasing_for_small_sigma(self):
        ws = np.linspace(0.0, 1.0, 101)
        for sigma in (0.05, 0.4, 0.99):
            vals = [blend_sigma_array(np.array([sigma]), w)[0] for w in ws]
            assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))

    def test_continuous_in_warmth(self):
        ws = np.linspace(0.0, 1.0, 2001)
        vals = np.array([blend_sigma_array(np.array([0.3]), w)[0] for w in ws])
        assert np.max(np.abs(np.diff(vals))) < 2e-3  # Lipschitz-small increments

    def test_lower_bound_invariant(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            sigma = rng.uniform(0.01, 3.0, size=5)
            w = rng.uniform(0.0, 1.0)
            out = blend_sigma_array(sigma, w)
            bound = np.minimum(1.0 - w, sigma) * w + (1.0 - w)
            assert np.all(out >= bound - 1e-15)
            assert np.all(out > 0.0)


class TestNormalise:
    def test_x_equals_mu_gives_zeros(self):
        m = make_moments(np.array([1.0, -2.0]), np.array([0.5, 2.0]))
        out = normalise(Field(m.mu.data.copy()), m, m.sigma)
        assert np.all(out.data == 0.0)

    def test_identity_when_standard_moments(self):
        m = make_moments(np.zeros(3), np.ones(3))
        x = Field(np.array([0.1, -0.5, 2.0]))
        np.testing.assert_array_equal(normalise(x, m, m.sigma).data, x.data)

    def test_hand_example(self):
        m = make_moments(np.array([1.0]), np.array([0.5]))
        out = normalise(Field(np.array([3.0])), m, m.sigma)
        assert out.data[0] == 4.0
        back = unnormalise(Field(np.array([4.0])), m, m.sigma)
        assert back.data[0] == 3.0

    def test_unnormalise_of_zero_is_mu(self):
        m = make_moments(np.array([1.0, 2.0]), np.array([0.5, 3.0]))
        out = unnormalise(Field(np.zeros(2)), m, m.sigma)
        np.testing.assert_array_equal(out.data, m.mu.data)

    def test_round_trip_both_ways(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            d = rng.integers(1, 12)
            m = make_moments(rng.standard_normal(d), rng.uniform(0.01, 4.0, d))
            sn = blend_sigma(m.sigma, rng.uniform(0, 1)).sigma_norm
            x = Field(rng.standard_normal(d) * 5)
            there = normalise(x, m, sn)
            back = unnormalise(there, m, sn)
            np.testing.assert_allclose(back.data, x.data, atol=1e-12)
            again = normalise(unnormalise(x, m, sn), m, sn)
            np.testing.assert_allclose(again.data, x.data, atol=1e-12)


class TestInformedPrior:
    def test_monte_carlo_moments(self):
        m = make_moments(np.full(1, 2.0), np.full(1, 3.0))
        rng = np.random.default_rng(55)
        draws = np.array([sample_informed_prior(m, m.sigma, rng).data[0] for _ in range(100_000)])
        assert abs(draws.mean() - 2.0) < 0.03
        assert abs(draws.std() - 3.0) < 0.03

    def test_sigma_min_scaling(self):
        m = make_moments(np.zeros(1), np.zeros(1), sigma_min=0.01)
        rng = np.random.default_rng(56)
        draws = np.array([sample_informed_prior(m, m.sigma, rng).data[0] for _ in range(20_000)])
        assert abs(draws.std() - 0.01) < 0.001

    def test_fixed_seed_reproducible(self):
        m = make_moments(np.zeros(3), np.ones(3))
        a = sample_informed_prior(m, m.sigma, np.random.default_rng(9)).data
        b = sample_informed_prior(m, m.sigma, np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)


class TestMomentCache:
    def test_round_trip_and_miss(self, tmp_path):
        rng = np.random.default_rng(2)
        mus = rng.standard_normal((10, 4))
        sigmas = rng.uniform(0.01, 2.0, (10, 4))
        path = tmp_path / "moments.cache"
        warmstart.write_moment_cache(
            path, mus, sigmas, task="analytic", dataset_seed=3,
            sigma_min=0.01, h_checkpoint_hash="abc123",
        )
        cache = warmstart.MomentCache(path)
        assert cache.n_samples == 10
        assert cache.h_checkpoint_hash == "abc123"
        mu, sig = cache.get(7)
        np.testing.assert_array_equal(mu, mus[7])
        np.testing.assert_array_equal(sig, sigmas[7])
        with pytest.raises(warmstart.CacheMissError):
            cache.get(10)

    def test_rejects_mismatched_tables(self, tmp_path):
        with pytest.raises(ShapeError):
            warmstart.write_moment_cache(
                tmp_path / "x.cache", np.zeros((3, 2)), np.zeros((4, 2)),
                task="t", dataset_seed=0, sigma_min=0.01, h_checkpoint_hash="h",
            )


class TestDistributionalIdentity:
    def test_oracle_normalised_data_is_standard_normal(self):
        from warmflow.tasks import AnalyticGaussianTask, AnalyticTaskConfig

        task = AnalyticGaussianTask(AnalyticTaskConfig(dim_c=2, dim_x=2, rho=0.8))
        rng = np.random.default_rng(77)
        n = 10_000
        normed = np.empty((n, 2))
        for i in range(n):
            s = task.draw(rng)
            mu, std = task.oracle_conditional_moments(s.context)
            normed[i] = (s.x0 - mu) / std
        mean = normed.mean(axis=0)
        var = normed.var(axis=0)
        assert np.all(np.abs(mean) < 3.0 / np.sqrt(n))
        assert np.all(np.abs(var - 1.0) < 5.0 / np.sqrt(n))
