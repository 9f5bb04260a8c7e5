import numpy as np
import pytest

from warmflow import flowmatch, nn
from warmflow.fields import Field
from warmflow.flowmatch import (
    TrainBatch,
    TrainMode,
    conditioning_for_mode,
    make_path_point,
    train_step,
    velocity_to_noise_pred,
    velocity_to_x0_pred,
)


class _FixedNoise:
    """rng stand-in producing a prescribed standard_normal draw."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def standard_normal(self, n):
        assert n == self.values.size
        return self.values.copy()


class TestPathPoint:
    def test_endpoint_s0_is_data(self):
        x0 = Field(np.array([0.7, -0.2]))
        pt = make_path_point(x0, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(pt.x_s.data, x0.data)

    def test_endpoint_s1_is_noise(self):
        x0 = Field(np.array([0.7, -0.2]))
        pt = make_path_point(x0, 1.0, np.random.default_rng(0))
        np.testing.assert_array_equal(pt.x_s.data, pt.noise.data)
        np.testing.assert_array_equal(pt.velocity_target.data, pt.noise.data - x0.data)

    def test_hand_arithmetic_quarter(self):
        pt = make_path_point(Field(np.array([1.0])), 0.25, _FixedNoise([-1.0]))
        assert pt.x_s.data[0] == 0.5
        assert pt.velocity_target.data[0] == -2.0

    def test_invariant_holds_for_random_draws(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x0 = Field(rng.standard_normal(4))
            s = rng.uniform(0, 1)
            pt = make_path_point(x0, s, rng)
            np.testing.assert_allclose(
                pt.x_s.data, (1 - s) * x0.data + s * pt.noise.data, atol=1e-15
            )


class TestConversions:
    def test_noise_pred_at_s1_is_state(self):
        xs = Field(np.array([1.0, 2.0]))
        v = Field(np.array([5.0, -3.0]))
        out = velocity_to_noise_pred(v, xs, 1.0)
        np.testing.assert_array_equal(out.data, xs.data)

    def test_substitution_example(self):
        # x0=2, eps=0, s=0.5: x_s=1, v=-2
        xs = Field(np.array([1.0]))
        v = Field(np.array([-2.0]))
        assert velocity_to_noise_pred(v, xs, 0.5).data[0] == 0.0
        assert velocity_to_x0_pred(v, xs, 0.5).data[0] == 2.0

    def test_x0_pred_at_s0_is_state(self):
        xs = Field(np.array([0.3]))
        assert velocity_to_x0_pred(Field(np.array([9.9])), xs, 0.0).data[0] == 0.3

    @pytest.mark.parametrize("s", [round(0.1 * k, 1) for k in range(11)])
    def test_identities_recover_endpoints(self, s):
        rng = np.random.default_rng(int(s * 10) + 1)
        x0 = Field(rng.standard_normal(6))
        pt = make_path_point(x0, s, rng)
        eps_hat = velocity_to_noise_pred(pt.velocity_target, pt.x_s, s)
        x0_hat = velocity_to_x0_pred(pt.velocity_target, pt.x_s, s)
        np.testing.assert_allclose(eps_hat.data, pt.noise.data, atol=1e-12)
        np.testing.assert_allclose(x0_hat.data, x0.data, atol=1e-12)
        recon = (1 - s) * x0_hat.data + s * eps_hat.data
        np.testing.assert_allclose(recon, pt.x_s.data, atol=1e-12)


class TestModeWiring:
    def setup_method(self):
        self.mu = np.array([[1.0, -1.0]])
        self.sigma = np.array([[0.2, 2.0]])

    def test_warm_blended_at_zero_warmth_matches_baseline_sigma(self):
        cond = conditioning_for_mode(TrainMode.WARM_BLENDED, self.mu, self.sigma, np.zeros(1))
        assert np.all(cond.sigma_norm == 1.0)
        base = conditioning_for_mode(TrainMode.BASELINE, None, None, np.zeros(1))
        assert np.all(base.sigma_norm == 1.0)

    def test_warm_no_blend_uses_raw_sigma_at_w1(self):
        cond = conditioning_for_mode(TrainMode.WARM_NO_BLEND, self.mu, self.sigma, np.ones(1))
        np.testing.assert_array_equal(cond.sigma_norm, self.sigma)

    def test_mean_only_forces_unit_sigma_but_subtracts_mu(self):
        cond = conditioning_for_mode(TrainMode.MEAN_ONLY, self.mu, self.sigma, np.ones(1))
        assert np.all(cond.sigma_norm == 1.0)
        np.testing.assert_array_equal(cond.mu_shift, self.mu)
        assert np.all(cond.sigma_feed == 1.0)  # architectural parity channel

    def test_features_only_feeds_raw_moments_without_normalising(self):
        cond = conditioning_for_mode(TrainMode.FEATURES_ONLY, self.mu, self.sigma, np.ones(1))
        assert np.all(cond.mu_shift == 0.0)
        assert np.all(cond.sigma_norm == 1.0)
        np.testing.assert_array_equal(cond.mu_feed, self.mu)
        np.testing.assert_array_equal(cond.sigma_feed, self.sigma)

    def test_baseline_has_no_moment_channels(self):
        cond = conditioning_for_mode(TrainMode.BASELINE, None, None, np.zeros(3))
        assert cond.mu_feed is None and cond.sigma_feed is None
        assert flowmatch.velocity_input_dim(TrainMode.BASELINE, 4, 6) == 10
        assert flowmatch.velocity_input_dim(TrainMode.WARM_BLENDED, 4, 6) == 18

    def test_moment_modes_require_moments(self):
        with pytest.raises(ValueError):
            conditioning_for_mode(TrainMode.WARM_BLENDED, None, None, np.ones(1))


class TestTrainStep:
    def _batch(self, b, d, c, rng, zero_data=False):
        x0 = np.zeros((b, d)) if zero_data else rng.standard_normal((b, d))
        return TrainBatch(x0=x0, ctx=rng.standard_normal((b, c)) * 0.0)

    def test_baseline_zero_network_loss_near_one(self):
        # with zero predictions on all-zero data, loss = E|eps|^2 / (B*D) -> 1
        d, c, b = 2, 3, 4096
        spec = nn.MlpSpec(d + c, (8,), d, activation="silu", embed_dim=8, n_scalars=2)
        state = nn.init_train_state(np.zeros(nn.n_params(spec)))
        rng = np.random.default_rng(101)
        batch = self._batch(b, d, c, rng, zero_data=True)
        hyper = nn.TrainHyper(lr=1e-4, batch_size=b)
        _, loss = train_step(spec, state, batch, TrainMode.BASELINE, rng, hyper)
        assert abs(loss - 1.0) < 0.08

    def test_identical_seeds_give_identical_losses(self):
        d, c = 2, 2
        spec = nn.MlpSpec(d + c + 2 * d, (8,), d, activation="silu", embed_dim=8, n_scalars=2)
        hyper = nn.TrainHyper(lr=1e-3, batch_size=32)

        def run():
            rng = np.random.default_rng(7)
            state = nn.init_train_state(nn.init_params(spec, np.random.default_rng(1)))
            data_rng = np.random.default_rng(2)
            losses = []
            for _ in range(3):
                batch = TrainBatch(
                    x0=data_rng.standard_normal((32, d)),
                    ctx=data_rng.standard_normal((32, c)),
                    mu=np.zeros((32, d)),
                    sigma=np.ones((32, d)),
                )
                state, loss = train_step(spec, state, batch, TrainMode.WARM_BLENDED, rng, hyper)
                losses.append(loss)
            return losses

        assert run() == run()

    def test_loss_decreases_on_simple_problem(self):
        d, c = 2, 2
        spec = nn.MlpSpec(d + c, (16,), d, activation="silu", embed_dim=8, n_scalars=2)
        rng = np.random.default_rng(3)
        state = nn.init_train_state(nn.init_params(spec, rng))
        hyper = nn.TrainHyper(lr=3e-3, batch_size=64)
        first = last = None
        for i in range(400):
            batch = TrainBatch(x0=rng.standard_normal((64, d)) * 0.05, ctx=np.zeros((64, c)))
            state, loss = train_step(spec, state, batch, TrainMode.BASELINE, rng, hyper)
            if i < 20:
                first = loss if first is None else first
            last = loss
        assert last < 0.9 * 1.0  # must beat the zero-prediction plateau
        assert first is not None
