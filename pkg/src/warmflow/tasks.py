"""Synthetic conditional-generation tasks with exactly known ground truth.

Three task families:

* an analytic joint-Gaussian task (closed-form conditional moments and law),
* inpainting of stationary Gaussian-random-field images (conditional moments
  by exact Gaussian conditioning on the visible pixels),
* a 1D periodic spectral forecasting task (linear advection + damping +
  power-law stochastic forcing, so the stationary spectrum is known).

Dataset samples are pure functions of (seed, index); nothing is stored.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import solvers


@dataclass(frozen=True, eq=False)
class AnalyticContext:
    observed: np.ndarray


@dataclass(frozen=True, eq=False)
class InpaintingContext:
    masked: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class ForecastContext:
    prev: np.ndarray
    now: np.ndarray


@dataclass(frozen=True, eq=False)
class TaskSample:
    context: object
    x0: np.ndarray


# ---------------------------------------------------------------------------
# Analytic joint-Gaussian task


@dataclass(frozen=True)
class AnalyticTaskConfig:
    dim_c: int = 2
    dim_x: int = 2
    rho: float = 0.8
    # optional full joint covariance over (C, X); overrides rho when set
    joint_cov: tuple | None = None


class AnalyticGaussianTask:
    """Jointly Gaussian (C, X) with closed-form conditionals as oracles."""

    name = "analytic"

    def __init__(self, config: AnalyticTaskConfig):
        self.config = config
        dc, dx = config.dim_c, config.dim_x
        if config.joint_cov is not None:
            cov = np.asarray(config.joint_cov, dtype=np.float64)
            if cov.shape != (dc + dx, dc + dx):
                raise ValueError("joint covariance has the wrong shape")
        else:
            cov = np.eye(dc + dx)
            r = min(dc, dx)
            cov[np.arange(r), dc + np.arange(r)] = config.rho
            cov[dc + np.arange(r), np.arange(r)] = config.rho
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("joint covariance is not positive definite") from exc
        self.joint_cov = cov
        s_cc = cov[:dc, :dc]
        s_cx = cov[:dc, dc:]
        s_xx = cov[dc:, dc:]
        self._gain = np.linalg.solve(s_cc, s_cx).T  # (dx, dc)
        cond_cov = s_xx - self._gain @ s_cx
        self.cond_cov = cond_cov
        self._cond_chol = np.linalg.cholesky(cond_cov + 1e-12 * np.eye(dx))
        self.cond_std = np.sqrt(np.diag(cond_cov))

    @property
    def sample_dim(self) -> int:
        return self.config.dim_x

    @property
    def context_dim(self) -> int:
        return self.config.dim_c

    def draw(self, rng: np.random.Generator) -> TaskSample:
        joint = self._chol @ rng.standard_normal(self.config.dim_c + self.config.dim_x)
        c, x = joint[: self.config.dim_c], joint[self.config.dim_c :]
        return TaskSample(AnalyticContext(c), x)

    def context_features(self, context: AnalyticContext) -> np.ndarray:
        return np.asarray(context.observed, dtype=np.float64)

    def oracle_conditional_moments(self, context: AnalyticContext):
        mu = self._gain @ np.asarray(context.observed, dtype=np.float64)
        return mu, self.cond_std.copy()

    def oracle_conditional_sample(self, context: AnalyticContext, rng: np.random.Generator, n: int):
        mu, _ = self.oracle_conditional_moments(context)
        z = rng.standard_normal((n, self.config.dim_x))
        return mu + z @ self._cond_chol.T


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: tuple
    cov: tuple


@dataclass(frozen=True)
class AnalyticMixtureConfig:
    dim_c: int = 1
    dim_x: int = 1
    components: tuple = ()


def default_mixture_config() -> AnalyticMixtureConfig:
    """Two well-separated components with strongly informative context."""
    c1 = MixtureComponent(0.5, (-4.0, -4.0), ((1.0, 0.9), (0.9, 1.0)))
    c2 = MixtureComponent(0.5, (4.0, 4.0), ((1.0, 0.9), (0.9, 1.0)))
    return AnalyticMixtureConfig(dim_c=1, dim_x=1, components=(c1, c2))


class AnalyticMixtureTask:
    """Two-component Gaussian mixture over (C, X) with exact responsibilities."""

    name = "analytic_mixture"

    def __init__(self, config: AnalyticMixtureConfig):
        self.config = config
        dc, dx = config.dim_c, config.dim_x
        self._parts = []
        for comp in config.components:
            mean = np.asarray(comp.mean, dtype=np.float64)
            cov = np.asarray(comp.cov, dtype=np.float64)
            chol = np.linalg.cholesky(cov)
            s_cc = cov[:dc, :dc]
            gain = np.linalg.solve(s_cc, cov[:dc, dc:]).T
            cond_cov = cov[dc:, dc:] - gain @ cov[:dc, dc:]
            self._parts.append(
                {
                    "w": comp.weight,
                    "mean": mean,
                    "chol": chol,
                    "gain": gain,
                    "cond_cov": cond_cov,
                    "s_cc": s_cc,
                }
            )
        w = np.array([p["w"] for p in self._parts])
        self._weights = w / w.sum()

    @property
    def sample_dim(self) -> int:
        return self.config.dim_x

    @property
    def context_dim(self) -> int:
        return self.config.dim_c

    def draw(self, rng: np.random.Generator) -> TaskSample:
        dc = self.config.dim_c
        i = rng.choice(len(self._parts), p=self._weights)
        p = self._parts[i]
        joint = p["mean"] + p["chol"] @ rng.standard_normal(dc + self.config.dim_x)
        return TaskSample(AnalyticContext(joint[:dc]), joint[dc:])

    def context_features(self, context: AnalyticContext) -> np.ndarray:
        return np.asarray(context.observed, dtype=np.float64)

    def responsibilities(self, context: AnalyticContext) -> np.ndarray:
        c = np.asarray(context.observed, dtype=np.float64)
        dc = self.config.dim_c
        logs = []
        for p in self._parts:
            diff = c - p["mean"][:dc]
            sol = np.linalg.solve(p["s_cc"], diff)
            _, logdet = np.linalg.slogdet(p["s_cc"])
            logs.append(-0.5 * (diff @ sol + logdet + dc * np.log(2 * np.pi)))
        logs = np.asarray(logs) + np.log(self._weights)
        logs -= logs.max()
        r = np.exp(logs)
        return r / r.sum()

    def oracle_conditional_moments(self, context: AnalyticContext):
        c = np.asarray(context.observed, dtype=np.float64)
        dc = self.config.dim_c
        r = self.responsibilities(context)
        mus = np.stack([p["mean"][dc:] + p["gain"] @ (c - p["mean"][:dc]) for p in self._parts])
        variances = np.stack([np.diag(p["cond_cov"]) for p in self._parts])
        mu = r @ mus
        second = r @ (variances + mus**2)
        return mu, np.sqrt(np.maximum(second - mu**2, 1e-300))


def analytic_task_sample(rng: np.random.Generator, config: AnalyticTaskConfig):
    """One sample plus its oracle moments and a sampler for the exact conditional."""
    task = AnalyticGaussianTask(config)
    sample = task.draw(rng)
    moments = task.oracle_conditional_moments(sample.context)
    sampler = functools.partial(task.oracle_conditional_sample, sample.context)
    return sample, moments, sampler


# ---------------------------------------------------------------------------
# Gaussian-random-field inpainting


@dataclass(frozen=True)
class GrfTaskConfig:
    size: int = 16
    length_scale: float = 4.0
    visible_range: tuple[float, float] = (0.05, 0.20)
    jitter: float = 1e-8


class GrfInpaintingTask:
    """Stationary GRF images with Bernoulli pixel masks.

    The squared-exponential kernel has unit marginal variance, so images are
    globally zero-mean/unit-variance by construction. Conditional moments
    given the visible pixels are exact (Gaussian conditioning).
    """

    name = "inpainting"

    def __init__(self, config: GrfTaskConfig):
        self.config = config
        n = config.size
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        coords = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
        d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=2)
        self.cov = np.exp(-d2 / (2.0 * config.length_scale**2)) + config.jitter * np.eye(n * n)
        self._chol = np.linalg.cholesky(self.cov)

    @property
    def sample_dim(self) -> int:
        return self.config.size**2

    @property
    def context_dim(self) -> int:
        return 2 * self.sample_dim

    def draw_image(self, rng: np.random.Generator) -> np.ndarray:
        return self._chol @ rng.standard_normal(self.sample_dim)

    def draw(self, rng: np.random.Generator) -> TaskSample:
        x = self.draw_image(rng)
        lo, hi = self.config.visible_range
        frac = rng.uniform(lo, hi)
        mask = (rng.random(self.sample_dim) < frac).astype(np.float64)
        return TaskSample(InpaintingContext(masked=x * mask, mask=mask), x)

    def context_features(self, context: InpaintingContext) -> np.ndarray:
        return np.concatenate([context.masked, context.mask])

    def _partition(self, context: InpaintingContext):
        vis = np.flatnonzero(context.mask > 0.5)
        hid = np.flatnonzero(context.mask <= 0.5)
        return vis, hid

    def oracle_conditional_moments(self, context: InpaintingContext):
        """Exact conditional (mu, std) over all pixels; std is 0 at visible ones."""
        vis, hid = self._partition(context)
        mu = np.array(context.masked, dtype=np.float64)
        std = np.zeros(self.sample_dim)
        if hid.size:
            if vis.size:
                s_vv = self.cov[np.ix_(vis, vis)]
                s_hv = self.cov[np.ix_(hid, vis)]
                alpha = np.linalg.solve(s_vv, context.masked[vis])
                mu[hid] = s_hv @ alpha
                w = np.linalg.solve(s_vv, s_hv.T)
                var = np.diag(self.cov)[hid] - np.sum(s_hv * w.T, axis=1)
            else:
                mu[hid] = 0.0
                var = np.diag(self.cov)[hid]
            std[hid] = np.sqrt(np.maximum(var, 0.0))
        return mu, std

    def oracle_conditional_sample(self, context: InpaintingContext, rng: np.random.Generator, n: int):
        """Draws from the exact conditional law (full covariance, not just marginals)."""
        vis, hid = self._partition(context)
        out = np.tile(context.masked, (n, 1))
        if hid.size:
            if vis.size:
                s_vv = self.cov[np.ix_(vis, vis)]
                s_hv = self.cov[np.ix_(hid, vis)]
                w = np.linalg.solve(s_vv, s_hv.T)
                mu_h = w.T @ context.masked[vis]
                cond = self.cov[np.ix_(hid, hid)] - s_hv @ w
            else:
                mu_h = np.zeros(hid.size)
                cond = self.cov[np.ix_(hid, hid)]
            chol = np.linalg.cholesky(cond + 1e-10 * np.eye(hid.size))
            out[:, hid] = mu_h + rng.standard_normal((n, hid.size)) @ chol.T
        return out


def inpainting_task_sample(rng: np.random.Generator, config: GrfTaskConfig) -> TaskSample:
    return GrfInpaintingTask(config).draw(rng)


# ---------------------------------------------------------------------------
# Spectral forecasting


@dataclass(frozen=True)
class SpectralTaskConfig:
    n: int = 64
    advection_speed: float = 3.3
    damping: float = 0.85  # survival factor per step
    spectrum_exponent: float = -3.0


@functools.lru_cache(maxsize=None)
def _forcing_amplitudes(config: SpectralTaskConfig) -> np.ndarray:
    """rfft-coefficient amplitudes A_k with power ~ k^exponent, scaled so the
    stationary physical field has unit variance."""
    n = config.n
    k = np.arange(n // 2 + 1, dtype=np.float64)
    amp = np.zeros(n // 2 + 1)
    amp[1:] = k[1:] ** (config.spectrum_exponent / 2.0)
    # physical variance of one forcing draw (see irfft normalisation)
    var = (2.0 * np.sum(amp[1:-1] ** 2) + amp[-1] ** 2) / n**2
    target = 1.0 - config.damping**2  # stationary variance 1 after AR(1) filtering
    return amp * np.sqrt(target / var)


class SpectralForecastTask:
    """1D periodic advection with damping and power-law stochastic forcing."""

    name = "forecast"

    def __init__(self, config: SpectralTaskConfig):
        self.config = config
        self._amp = _forcing_amplitudes(config)
        n = config.n
        self._phase = np.exp(-2j * np.pi * np.arange(n // 2 + 1) * config.advection_speed / n)

    @property
    def sample_dim(self) -> int:
        return self.config.n

    @property
    def context_dim(self) -> int:
        return 2 * self.config.n

    def advect(self, state: np.ndarray) -> np.ndarray:
        return np.fft.irfft(np.fft.rfft(state) * self._phase, self.config.n)

    def draw_forcing(self, rng: np.random.Generator) -> np.ndarray:
        n = self.config.n
        m = n // 2 + 1
        coef = np.zeros(m, dtype=np.complex128)
        coef[1:-1] = self._amp[1:-1] * (
            rng.standard_normal(m - 2) + 1j * rng.standard_normal(m - 2)
        ) / np.sqrt(2.0)
        coef[-1] = self._amp[-1] * rng.standard_normal()
        return np.fft.irfft(coef * n, n)

    def step(self, state_prev: np.ndarray, state_now: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        del state_prev  # dynamics are first-order; the extra lag is context only
        return self.config.damping * self.advect(state_now) + self.draw_forcing(rng)

    def deterministic_mean(self, state_now: np.ndarray) -> np.ndarray:
        return self.config.damping * self.advect(state_now)

    @property
    def forcing_std(self) -> float:
        return float(np.sqrt(1.0 - self.config.damping**2))

    def draw_stationary(self, rng: np.random.Generator) -> np.ndarray:
        n = self.config.n
        m = n // 2 + 1
        scale = self._amp / np.sqrt(1.0 - self.config.damping**2)
        coef = np.zeros(m, dtype=np.complex128)
        coef[1:-1] = scale[1:-1] * (
            rng.standard_normal(m - 2) + 1j * rng.standard_normal(m - 2)
        ) / np.sqrt(2.0)
        coef[-1] = scale[-1] * rng.standard_normal()
        return np.fft.irfft(coef * n, n)

    def draw(self, rng: np.random.Generator) -> TaskSample:
        u0 = self.draw_stationary(rng)
        u1 = self.step(None, u0, rng)
        u2 = self.step(u0, u1, rng)
        return TaskSample(ForecastContext(prev=u0, now=u1), u2)

    def context_features(self, context: ForecastContext) -> np.ndarray:
        return np.concatenate([context.prev, context.now])

    def oracle_conditional_moments(self, context: ForecastContext):
        return self.deterministic_mean(context.now), np.full(self.config.n, self.forcing_std)

    def oracle_conditional_sample(self, context: ForecastContext, rng: np.random.Generator, n: int):
        mu = self.deterministic_mean(context.now)
        return mu + np.stack([self.draw_forcing(rng) for _ in range(n)])

    def simulate(self, n_steps: int, rng: np.random.Generator) -> np.ndarray:
        """Ground-truth trajectory from a stationary start; (n_steps+1, n)."""
        states = [self.draw_stationary(rng)]
        prev = None
        for _ in range(n_steps):
            nxt = self.step(prev, states[-1], rng)
            prev = states[-1]
            states.append(nxt)
        return np.stack(states)


@functools.lru_cache(maxsize=None)
def _forecast_task_for(config: SpectralTaskConfig) -> SpectralForecastTask:
    return SpectralForecastTask(config)


def forecast_step(state_prev, state_now, rng: np.random.Generator, config: SpectralTaskConfig):
    """Advance the ground-truth dynamics by one step."""
    task = _forecast_task_for(config)
    return task.step(state_prev, np.asarray(state_now, dtype=np.float64), rng)


# ---------------------------------------------------------------------------
# Deterministic datasets: pure functions of (seed, index)


@dataclass(frozen=True, eq=False)
class TaskDataset:
    seed: int
    x0: np.ndarray        # (N, D)
    ctx: np.ndarray       # (N, C)
    contexts: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.x0.shape[0]


def sample_at(task, seed: int, index: int) -> TaskSample:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    return task.draw(rng)


def build_dataset(task, seed: int, n: int) -> TaskDataset:
    samples = [sample_at(task, seed, i) for i in range(n)]
    x0 = np.stack([s.x0 for s in samples])
    ctx = np.stack([task.context_features(s.context) for s in samples])
    return TaskDataset(seed=seed, x0=x0, ctx=ctx, contexts=[s.context for s in samples])


# ---------------------------------------------------------------------------
# Autoregressive ensembles


@dataclass(frozen=True, eq=False)
class RolloutResult:
    """Ensemble trajectories shaped (n_ensemble, 2 + n_steps, n); the first
    two frames are the shared initial conditions."""

    trajectories: np.ndarray
    truncated_at: np.ndarray  # step index of first non-finite state, -1 if none
    total_evals: int


def rollout(
    bundle: solvers.GenerativeBundle,
    initial_context: ForecastContext,
    n_steps: int,
    n_ensemble: int,
    spec: solvers.SolverSpec,
    member_seeds,
) -> RolloutResult:
    """Autoregressive ensemble forecast; each member feeds its own previous
    two outputs back as context and owns an independent RNG stream."""
    if n_ensemble < 1:
        raise ValueError("n_ensemble must be >= 1")
    n = initial_context.now.size
    member_seeds = list(member_seeds)
    if len(member_seeds) != n_ensemble:
        raise ValueError("need one seed per ensemble member")
    rngs = [np.random.default_rng(np.random.SeedSequence([int(s)])) for s in member_seeds]

    prev = np.tile(initial_context.prev, (n_ensemble, 1))
    now = np.tile(initial_context.now, (n_ensemble, 1))
    frames = [prev.copy(), now.copy()]
    truncated = np.full(n_ensemble, -1, dtype=int)
    total_evals = 0

    for step in range(n_steps):
        ctx = np.concatenate([prev, now], axis=1)
        z = np.stack([r.standard_normal(n) for r in rngs])
        nxt, nfe = _sample_next(bundle, ctx, spec, z)
        total_evals += nfe * n_ensemble
        bad = ~np.all(np.isfinite(nxt), axis=1)
        newly = bad & (truncated < 0)
        truncated[newly] = step
        frozen = truncated >= 0
        nxt[frozen] = now[frozen]  # truncated members keep their last state
        frames.append(nxt.copy())
        prev, now = now, nxt

    return RolloutResult(
        trajectories=np.stack(frames, axis=1),
        truncated_at=truncated,
        total_evals=total_evals,
    )


def _sample_next(bundle, ctx, spec, z):
    """One conditional draw per row with caller-supplied start noise.

    A non-finite state in the batched integration triggers a per-member
    retry so only the diverging members come back as NaN rows.
    """
    try:
        return _integrate_rows(bundle, ctx, spec, z)
    except solvers.SolverError:
        out = np.empty_like(z)
        nfe = spec.nfe
        for i in range(z.shape[0]):
            try:
                row, nfe = _integrate_rows(bundle, ctx[i : i + 1], spec, z[i : i + 1])
                out[i] = row[0]
            except solvers.SolverError:
                out[i] = np.nan
        return out, nfe


def _integrate_rows(bundle, ctx, spec, z):
    cond = solvers.prepare_conditioning(bundle, ctx, spec)
    p = bundle.p
    vf = lambda x, s: solvers.predict_velocity(p.spec, p.params, bundle.mode, x, ctx, cond, s)
    res = solvers.integrate(vf, z, spec)
    x0n = solvers.finish_to_zero(res.x, res.s_end, res.last_velocity)
    return x0n * cond.sigma_norm + cond.mu_shift, res.eval_count
