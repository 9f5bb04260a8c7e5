import numpy as np
import pytest

from warmflow import nn, solvers
from warmflow.fields import Field
from warmflow.flowmatch import TrainMode
from warmflow.metrics import energy_distance
from warmflow.solvers import (
    BudgetError,
    GenerativeBundle,
    ModelHandle,
    SolverError,
    build_grid,
    dpm_step,
    finish_to_zero,
    integrate,
    make_solver_spec,
    prepare_conditioning,
    sample_batch,
    sample_warm_start,
)
from warmflow.tasks import AnalyticGaussianTask, AnalyticTaskConfig


def gauss_path_factor(s):
    """(1-s)^2 + s^2: variance of the linear path between two unit normals."""
    return (1.0 - s) ** 2 + s**2


def analytic_velocity(x, s):
    """Optimal velocity field when data and noise are both standard normal."""
    return (2.0 * s - 1.0) / gauss_path_factor(s) * x


def analytic_noise_pred(x, s):
    """Exact noise prediction for standard normal data."""
    return x * s / gauss_path_factor(s)


class TestGrids:
    def test_uniform_four_steps(self):
        g = build_grid("uniform", 4, 0.0, 1.0)
        np.testing.assert_allclose(g.nodes, [1.0, 0.75, 0.5, 0.25, 0.0], atol=1e-15)

    def test_quadratic_two_steps(self):
        g = build_grid("quadratic", 2, 0.0, 1.0)
        np.testing.assert_allclose(g.nodes, [1.0, 0.25, 0.0], atol=1e-15)

    @pytest.mark.parametrize("nfe", [1, 3, 8, 17])
    def test_log_snr_descending_and_symmetric(self, nfe):
        s_min = 1e-4
        g = build_grid("log_snr", nfe, s_min, 1.0 - s_min)
        assert np.all(np.diff(g.nodes) < 0)
        np.testing.assert_allclose(g.nodes, 1.0 - g.nodes[::-1], atol=1e-12)

    def test_edm_nodes_in_bounds_and_descending(self):
        g = build_grid("edm", 10)
        assert np.all(np.diff(g.nodes) < 0)
        assert g.nodes[0] <= solvers.DEFAULT_S_MAX + 1e-12
        assert g.nodes[-1] >= solvers.DEFAULT_S_MIN - 1e-12
        # Karras ladder top maps to sigma=80 on the linear-path noise scale
        assert abs(g.nodes[0] - 80.0 / 81.0) < 1e-12

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValueError):
            build_grid("uniform", 4, 0.5, 0.2)
        with pytest.raises(ValueError):
            build_grid("log_snr", 4, 0.0, 1.0)
        with pytest.raises(ValueError):
            build_grid("uniform", 0, 0.0, 1.0)

    def test_budget_divisibility(self):
        with pytest.raises(BudgetError):
            make_solver_spec("rk4", "uniform", 6)
        spec = make_solver_spec("rk4", "uniform", 8)
        assert spec.nfe == 8 and spec.grid.nfe == 2

    def test_spec_json_round_trip(self):
        spec = make_solver_spec("dpm3", "log_snr", 12, warmth=0.8)
        clone = solvers.solver_spec_from_json(spec.to_json())
        assert clone.method == "dpm3" and clone.nfe == 12 and clone.warmth == 0.8
        np.testing.assert_allclose(clone.grid.nodes, spec.grid.nodes)


class TestDpmStep:
    def _point_mass_oracle(self, x0):
        def fn(x, s):
            return (x - (1.0 - s) * x0) / s

        return fn

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_exact_oracle_single_step_recovers_x0(self, order):
        rng = np.random.default_rng(40 + order)
        x0 = rng.standard_normal(5)
        noise = rng.standard_normal(5)
        out = dpm_step(self._point_mass_oracle(x0), noise, 1.0, 0.0, order)
        np.testing.assert_allclose(out, x0, atol=1e-5)

    def test_order1_full_step_returns_x0_prediction(self):
        # at s_to = 0 the update coefficients are alpha=1, sigma=0
        x0 = np.array([0.3, -1.2])
        noise = np.array([2.0, 0.1])
        out = dpm_step(self._point_mass_oracle(x0), noise, 1.0, 0.0, 1)
        np.testing.assert_allclose(out, x0, atol=1e-8)

    def test_order1_equals_ddim_closed_form(self):
        rng = np.random.default_rng(44)
        for _ in range(25):
            x = rng.standard_normal(4)
            s_from = rng.uniform(0.3, 0.95)
            s_to = rng.uniform(0.02, s_from - 0.1)
            eps_const = rng.standard_normal(4)
            fn = lambda xa, s: eps_const
            got = dpm_step(fn, x, s_from, s_to, 1)
            # independent form: exponential integrator in log-SNR time
            lam = lambda s: np.log((1 - s) / s)
            h = lam(s_to) - lam(s_from)
            alpha_f, alpha_t = 1 - s_from, 1 - s_to
            want = (alpha_t / alpha_f) * x - s_to * np.expm1(h) * eps_const
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_rejects_non_descending_times(self):
        with pytest.raises(ValueError):
            dpm_step(lambda x, s: x, np.zeros(2), 0.3, 0.5, 1)
        with pytest.raises(ValueError):
            dpm_step(lambda x, s: x, np.zeros(2), 0.5, 0.2, 4)

    def test_dpm3_endpoint_variance_on_gaussian_field(self):
        rng = np.random.default_rng(46)
        z = rng.standard_normal(100_000)
        spec = make_solver_spec("dpm3", "log_snr", 6)
        res = integrate(analytic_velocity, z, spec)
        x0 = finish_to_zero(res.x, res.s_end, res.last_velocity)
        assert res.eval_count == 6
        assert abs(np.var(x0) - 1.0) < 0.02

    def test_field_wrapper_round_trip(self):
        out = dpm_step(self._point_mass_oracle(np.zeros(3)), Field(np.ones(3)), 0.9, 0.4, 2)
        assert isinstance(out, Field) and out.shape == (3,)


class TestIntegrate:
    @pytest.mark.parametrize("method", solvers.METHODS)
    @pytest.mark.parametrize("grid", solvers.GRID_KINDS)
    def test_constant_field_exact(self, method, grid):
        c = np.array([0.7, -1.3])
        spec = make_solver_spec(method, grid, 4 * solvers.EVALS_PER_STEP[method])
        res = integrate(lambda x, s: c, np.zeros(2), spec)
        want = -c * (spec.grid.nodes[0] - spec.grid.nodes[-1])
        np.testing.assert_allclose(res.x, want, atol=1e-12)
        assert res.eval_count == spec.nfe

    def test_single_midpoint_step_on_decay_field(self):
        # dx/dtau = -x in time-to-go tau = 1-s; one midpoint step gives 0.5
        spec = make_solver_spec("midpoint", "uniform", 2, s_min=0.0, s_max=1.0)
        res = integrate(lambda x, s: x, np.array([1.0]), spec)
        assert res.x[0] == 0.5
        assert abs(res.x[0] - np.exp(-1.0)) < 0.14  # vs exact e^-1

    @pytest.mark.parametrize("method", solvers.METHODS)
    def test_eval_count_matches_budget(self, method):
        calls = 0

        def vf(x, s):
            nonlocal calls
            calls += 1
            return analytic_velocity(x, s)

        spec = make_solver_spec(method, "uniform", 12 * solvers.EVALS_PER_STEP[method])
        res = integrate(vf, np.array([0.5]), spec)
        assert calls == res.eval_count == spec.nfe

    def test_rk4_matches_high_resolution_reference(self):
        z = np.array([1.3, -0.4, 2.2])
        ref = integrate(analytic_velocity, z, make_solver_spec("rk4", "uniform", 4000))
        got = integrate(analytic_velocity, z, make_solver_spec("rk4", "uniform", 40))
        assert np.max(np.abs(got.x - ref.x)) < 1e-3
        # the flow preserves magnitudes: |x(0)| == |z|
        x0 = finish_to_zero(ref.x, ref.s_end, ref.last_velocity)
        np.testing.assert_allclose(np.abs(x0), np.abs(z), atol=1e-3)

    @pytest.mark.parametrize(
        "method,nominal", [("euler", 1.0), ("midpoint", 2.0), ("rk4", 4.0)]
    )
    def test_order_of_accuracy(self, method, nominal):
        z = np.array([1.0, -0.7])
        ref = integrate(analytic_velocity, z, make_solver_spec("rk4", "uniform", 4000)).x
        epe = solvers.EVALS_PER_STEP[method]
        nfes = [8, 16, 32, 64]
        errs = []
        for nfe in nfes:
            got = integrate(analytic_velocity, z, make_solver_spec(method, "uniform", nfe * epe)).x
            errs.append(np.max(np.abs(got - ref)))
        slope = -np.polyfit(np.log(nfes), np.log(errs), 1)[0]
        assert abs(slope - nominal) < 0.3

    def test_nonfinite_state_aborts_with_diagnostic(self):
        def bad(x, s):
            return x * np.inf if s < 0.5 else x

        with pytest.raises(SolverError, match="step"):
            integrate(bad, np.ones(2), make_solver_spec("euler", "uniform", 8))


def _tiny_bundle(mode, sample_dim, ctx_dim, seed=0, with_h=True):
    p_spec = nn.MlpSpec(
        input_dim=sample_dim + ctx_dim + (0 if mode is TrainMode.BASELINE else 2 * sample_dim),
        hidden_dims=(8,),
        output_dim=sample_dim,
        embed_dim=8,
        n_scalars=2,
    )
    rng = np.random.default_rng(seed)
    h = None
    if with_h and mode is not TrainMode.BASELINE:
        h_spec = nn.MlpSpec(ctx_dim, (4,), 2 * sample_dim, embed_dim=8)
        h = ModelHandle(h_spec, nn.init_params(h_spec, rng))
    return GenerativeBundle(
        p=ModelHandle(p_spec, nn.init_params(p_spec, rng)),
        mode=mode,
        h=h,
        sample_dim=sample_dim,
    )


class TestSampling:
    def test_oracle_everything_matches_conditional_law(self):
        # oracle moments + oracle normalised-space velocity, 1 midpoint step
        task = AnalyticGaussianTask(AnalyticTaskConfig(dim_c=2, dim_x=2, rho=0.8))
        rng = np.random.default_rng(71)
        sample = task.draw(rng)
        mu, std = task.oracle_conditional_moments(sample.context)
        n = 10_000
        bundle = _tiny_bundle(TrainMode.WARM_BLENDED, 2, 2, with_h=False)
        spec = make_solver_spec("midpoint", "uniform", 2)
        ctx = np.tile(task.context_features(sample.context), (n, 1))
        gen, nfe = sample_batch(
            bundle, ctx, spec, np.random.default_rng(72),
            oracle_moments=(mu, std), velocity_fn=analytic_velocity,
        )
        assert nfe == 2
        ref = task.oracle_conditional_sample(sample.context, np.random.default_rng(73), n)
        assert energy_distance(gen, ref) < 0.01

    def test_zero_warmth_normalisation_is_unit(self):
        bundle = _tiny_bundle(TrainMode.WARM_BLENDED, 3, 2)
        spec = make_solver_spec("euler", "uniform", 4, warmth=0.0)
        cond = prepare_conditioning(bundle, np.zeros((5, 2)), spec)
        assert np.all(cond.sigma_norm == 1.0)

    def test_fixed_seed_reproducible(self):
        bundle = _tiny_bundle(TrainMode.WARM_BLENDED, 3, 2)
        spec = make_solver_spec("dpm2", "log_snr", 8)
        a = sample_warm_start(bundle, np.ones(2), spec, np.random.default_rng(5))
        b = sample_warm_start(bundle, np.ones(2), spec, np.random.default_rng(5))
        np.testing.assert_array_equal(a.data, b.data)
        assert a.shape == (3,)

    def test_baseline_bundle_needs_no_h(self):
        bundle = _tiny_bundle(TrainMode.BASELINE, 2, 2)
        spec = make_solver_spec("midpoint", "uniform", 4)
        out, nfe = sample_batch(bundle, np.zeros((6, 2)), spec, np.random.default_rng(1))
        assert out.shape == (6, 2) and nfe == 4

    def test_moment_mode_without_h_rejected(self):
        bundle = _tiny_bundle(TrainMode.WARM_NO_BLEND, 2, 2, with_h=False)
        spec = make_solver_spec("euler", "uniform", 2)
        with pytest.raises(ValueError):
            sample_batch(bundle, np.zeros((2, 2)), spec, np.random.default_rng(0))
