"""Time grids, fixed-step ODE integrators and exponential-integrator steps.

The sampling ODE runs the linear-path velocity field from s_max (noise) down
to s_min (data). Exponential-integrator steps operate in log-SNR time through
the noise-prediction equivalence and use the data-prediction form, which is
the numerically stable direction when integrating towards data. Integration
stops at s_min; the caller finishes with an exact prediction-style jump to
s=0 using the last velocity evaluation, so the declared evaluation budget is
consumed exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .fields import Field
from . import nn
from .flowmatch import (
    ModeConditioning,
    TrainMode,
    conditioning_for_mode,
    predict_velocity,
)
from .warmstart import DEFAULT_SIGMA_MIN, predict_moments_batch

DEFAULT_S_MIN = 1e-4
DEFAULT_S_MAX = 1.0 - 1e-4

# Interior clamp for log-SNR computations inside an exponential-integrator
# step; lambda(s) diverges at s in {0, 1}.
_S_EPS = 1e-6

GRID_KINDS = ("uniform", "quadratic", "log_snr", "edm")
METHODS = ("euler", "midpoint", "rk4", "dpm1", "dpm2", "dpm3")
EVALS_PER_STEP = {"euler": 1, "midpoint": 2, "rk4": 4, "dpm1": 1, "dpm2": 2, "dpm3": 3}

EDM_SIGMA_MIN = 0.002
EDM_SIGMA_MAX = 80.0
EDM_RHO = 7.0


class SolverError(RuntimeError):
    """Non-finite state encountered mid-integration."""


class BudgetError(ValueError):
    """NFE budget incompatible with the integrator's evaluations per step."""


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Descending path-time nodes. ``nfe`` counts intervals, which equals the
    evaluation budget for a one-evaluation-per-step integrator; methods that
    spend k evaluations per step build their grid with budget/k intervals."""

    kind: str
    nfe: int
    nodes: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.nodes) >= 0):
            raise ValueError("grid nodes must be strictly decreasing")
        if len(self.nodes) != self.nfe + 1:
            raise ValueError("node count must be nfe + 1")


def _lam(s):
    return np.log((1.0 - s) / s)


def _inv_lam(lam):
    return 1.0 / (1.0 + np.exp(lam))


def build_grid(kind: str, nfe: int, s_min: float = DEFAULT_S_MIN, s_max: float = DEFAULT_S_MAX) -> TimeGrid:
    """Construct a descending time grid with ``nfe`` intervals on [s_min, s_max]."""
    if kind not in GRID_KINDS:
        raise ValueError(f"unknown grid kind {kind!r}")
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    if not 0.0 <= s_min < s_max <= 1.0:
        raise ValueError("need 0 <= s_min < s_max <= 1")
    if kind == "uniform":
        nodes = np.linspace(s_max, s_min, nfe + 1)
    elif kind == "quadratic":
        nodes = np.linspace(np.sqrt(s_max), np.sqrt(s_min), nfe + 1) ** 2
    elif kind == "log_snr":
        if s_min <= 0.0 or s_max >= 1.0:
            raise ValueError("log_snr spacing needs 0 < s_min, s_max < 1")
        nodes = _inv_lam(np.linspace(_lam(s_max), _lam(s_min), nfe + 1))
        nodes[0], nodes[-1] = s_max, s_min  # pin endpoints against rounding
    else:  # edm
        if s_min <= 0.0 or s_max >= 1.0:
            raise ValueError("edm spacing needs 0 < s_min, s_max < 1")
        sig_hi = min(EDM_SIGMA_MAX, s_max / (1.0 - s_max))
        sig_lo = max(EDM_SIGMA_MIN, s_min / (1.0 - s_min))
        if sig_lo >= sig_hi:
            raise ValueError("edm noise range collapsed for these bounds")
        ramp = np.linspace(sig_hi ** (1.0 / EDM_RHO), sig_lo ** (1.0 / EDM_RHO), nfe + 1) ** EDM_RHO
        nodes = ramp / (1.0 + ramp)
    return TimeGrid(kind=kind, nfe=nfe, nodes=nodes)


@dataclass(frozen=True, eq=False)
class SolverSpec:
    method: str
    grid: TimeGrid
    warmth: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 <= self.warmth <= 1.0:
            raise ValueError("warmth must lie in [0, 1]")

    @property
    def evals_per_step(self) -> int:
        return EVALS_PER_STEP[self.method]

    @property
    def nfe(self) -> int:
        return self.grid.nfe * self.evals_per_step

    def to_json(self) -> str:
        return json.dumps(
            {"method": self.method, "grid": self.grid.kind, "nfe": self.nfe, "warmth": self.warmth}
        )


def make_solver_spec(
    method: str,
    grid_kind: str,
    nfe: int,
    warmth: float = 1.0,
    s_min: float = DEFAULT_S_MIN,
    s_max: float = DEFAULT_S_MAX,
) -> SolverSpec:
    """Build a SolverSpec whose total evaluation count equals ``nfe`` exactly."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    epe = EVALS_PER_STEP[method]
    if nfe < epe or nfe % epe:
        raise BudgetError(f"nfe={nfe} is not a positive multiple of {epe} ({method})")
    return SolverSpec(method=method, grid=build_grid(grid_kind, nfe // epe, s_min, s_max), warmth=warmth)


def solver_spec_from_json(text: str) -> SolverSpec:
    d = json.loads(text)
    return make_solver_spec(d["method"], d["grid"], int(d["nfe"]), float(d.get("warmth", 1.0)))


# ---------------------------------------------------------------------------
# Exponential-integrator step in log-SNR time (noise-prediction interface)


def _x0_from_noise(x, eps, s):
    return (x - s * eps) / (1.0 - s)


def dpm_step(noise_pred_fn, x, s_from: float, s_to: float, order: int):
    """One exponential-integrator step from s_from down to s_to.

    ``noise_pred_fn(x, s)`` predicts the path noise (obtained from a velocity
    model via the linear-path conversion). Order 1 is the prediction-style
    closed-form update x_to = alpha_to*x0_hat + sigma_to*eps_hat; orders 2 and
    3 add log-SNR Taylor corrections from intermediate evaluations.
    """
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    if s_to >= s_from:
        raise ValueError("require s_to < s_from (integration runs towards data)")
    was_field = isinstance(x, Field)
    shape = x.shape if was_field else None
    x_arr = x.data if was_field else np.asarray(x, dtype=np.float64)

    sf = float(np.clip(s_from, _S_EPS, 1.0 - _S_EPS))
    eps_s = np.asarray(noise_pred_fn(x_arr, sf), dtype=np.float64)
    x0_s = _x0_from_noise(x_arr, eps_s, sf)

    if order == 1:
        out = (1.0 - s_to) * x0_s + s_to * eps_s
    else:
        # noise-prediction expansion in log-SNR time:
        #   x_t = (a_t/a_s) x - sig_t [phi1 f + h phi2 f' + h^2 phi3 f'']
        # with f = eps_hat(lambda), phi1 = e^h - 1, phi2 = phi1/h - 1,
        # phi3 = phi2/h - 1/2. Derivatives come from divided differences at
        # the intermediate nodes, so order k integrates polynomial eps_hat of
        # degree k-1 exactly. Integrating towards data the kernel weight
        # e^(-lambda) concentrates at the expansion point, which keeps these
        # accurate even for very large steps.
        st = float(np.clip(s_to, _S_EPS, 1.0 - _S_EPS))
        lam_s, lam_t = _lam(sf), _lam(st)
        h = lam_t - lam_s
        a_s = 1.0 - sf

        def kernel(s_dst, lam_span, f0, d1=None):
            a_d, sig_d = 1.0 - s_dst, s_dst
            phi1 = np.expm1(lam_span)
            out = (a_d / a_s) * x_arr - sig_d * phi1 * f0
            if d1 is not None:
                phi2 = phi1 / lam_span - 1.0
                out = out - sig_d * lam_span * phi2 * d1
            return out

        if order == 2:
            r1 = 0.5
            s1 = float(_inv_lam(lam_s + r1 * h))
            x_s1 = kernel(s1, r1 * h, eps_s)
            eps_s1 = np.asarray(noise_pred_fn(x_s1, s1), dtype=np.float64)
            d01 = (eps_s1 - eps_s) / (r1 * h)
            out = kernel(st, h, eps_s, d01)
        else:
            r1, r2 = 1.0 / 3.0, 2.0 / 3.0
            s1 = float(_inv_lam(lam_s + r1 * h))
            s2 = float(_inv_lam(lam_s + r2 * h))
            x_s1 = kernel(s1, r1 * h, eps_s)
            eps_s1 = np.asarray(noise_pred_fn(x_s1, s1), dtype=np.float64)
            d01 = (eps_s1 - eps_s) / (r1 * h)
            x_s2 = kernel(s2, r2 * h, eps_s, d01)
            eps_s2 = np.asarray(noise_pred_fn(x_s2, s2), dtype=np.float64)
            d12 = (eps_s2 - eps_s1) / ((r2 - r1) * h)
            d012 = (d12 - d01) / (r2 * h)
            q1 = d01 - d012 * (r1 * h)  # quadratic-model f'(lambda_s)
            q2 = 2.0 * d012             # quadratic-model f''(lambda_s)
            phi1 = np.expm1(h)
            phi2 = phi1 / h - 1.0
            phi3 = phi2 / h - 0.5
            out = (
                (1.0 - st) / a_s * x_arr
                - st * (phi1 * eps_s + h * phi2 * q1 + h * h * phi3 * q2)
            )
    return Field(out, shape) if was_field else out


# ---------------------------------------------------------------------------
# Fixed-grid integration


@dataclass(frozen=True, eq=False)
class IntegrationResult:
    x: np.ndarray
    eval_count: int
    last_velocity: np.ndarray
    s_end: float


class _CountingVelocity:
    def __init__(self, fn):
        self.fn = fn
        self.count = 0
        self.last = None

    def __call__(self, x, s):
        v = np.asarray(self.fn(x, s), dtype=np.float64)
        self.count += 1
        self.last = v
        return v


def integrate(velocity_fn, x_start, spec: SolverSpec) -> IntegrationResult:
    """Drive x from the grid's first node to its last.

    Returns the state at s_min along with the exact number of velocity-model
    evaluations and the final velocity evaluation (for the jump to s=0).
    """
    was_field = isinstance(x_start, Field)
    shape = x_start.shape if was_field else None
    x = (x_start.data if was_field else np.asarray(x_start, dtype=np.float64)).copy()
    vf = _CountingVelocity(velocity_fn)
    nodes = spec.grid.nodes
    method = spec.method

    if method.startswith("dpm"):
        order = int(method[3])
        noise_fn = lambda xa, s: xa + (1.0 - s) * vf(xa, s)
        for i in range(len(nodes) - 1):
            x = dpm_step(noise_fn, x, float(nodes[i]), float(nodes[i + 1]), order)
            if not np.all(np.isfinite(x)):
                raise SolverError(f"non-finite state after step {i} (s={nodes[i + 1]:.6g})")
    else:
        for i in range(len(nodes) - 1):
            s0, s1 = float(nodes[i]), float(nodes[i + 1])
            dt = s1 - s0
            if method == "euler":
                x = x + dt * vf(x, s0)
            elif method == "midpoint":
                k1 = vf(x, s0)
                k2 = vf(x + 0.5 * dt * k1, s0 + 0.5 * dt)
                x = x + dt * k2
            else:  # rk4
                k1 = vf(x, s0)
                k2 = vf(x + 0.5 * dt * k1, s0 + 0.5 * dt)
                k3 = vf(x + 0.5 * dt * k2, s0 + 0.5 * dt)
                k4 = vf(x + dt * k3, s1)
                x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise SolverError(f"non-finite state after step {i} (s={s1:.6g})")

    if vf.count != spec.nfe:
        raise SolverError(f"evaluation accounting broke: {vf.count} != {spec.nfe}")
    return IntegrationResult(
        x=Field(x, shape) if was_field else x,
        eval_count=vf.count,
        last_velocity=vf.last,
        s_end=float(nodes[-1]),
    )


def finish_to_zero(x_end: np.ndarray, s_end: float, last_velocity: np.ndarray) -> np.ndarray:
    """Prediction-style jump from s_end to s=0 reusing the final velocity."""
    return x_end - s_end * last_velocity


# ---------------------------------------------------------------------------
# End-to-end conditional sampling


@dataclass(frozen=True, eq=False)
class ModelHandle:
    spec: nn.MlpSpec
    params: np.ndarray


@dataclass(frozen=True, eq=False)
class GenerativeBundle:
    """Everything needed to sample: the velocity model, its training mode,
    and (when the mode uses them) the frozen moment model."""

    p: ModelHandle
    mode: TrainMode
    h: ModelHandle | None = None
    sigma_min: float = DEFAULT_SIGMA_MIN
    sample_dim: int = 0


def sampling_warmth(mode: TrainMode, requested: float) -> float:
    """Warmth channel value used at sampling time for each mode."""
    if mode in (TrainMode.WARM_BLENDED, TrainMode.WARM_NO_BLEND):
        return float(requested)
    if mode is TrainMode.BASELINE:
        return 0.0
    return 1.0  # mean_only / features_only trained at fixed w=1


def prepare_conditioning(
    bundle: GenerativeBundle,
    ctx_feats: np.ndarray,
    spec: SolverSpec,
    oracle_moments=None,
) -> ModeConditioning:
    """Predict (or accept) moments for each context row and resolve the
    normalisation the sampler will use."""
    ctx_feats = np.atleast_2d(np.asarray(ctx_feats, dtype=np.float64))
    b = ctx_feats.shape[0]
    w = np.full(b, sampling_warmth(bundle.mode, spec.warmth))
    if bundle.mode is TrainMode.BASELINE:
        return conditioning_for_mode(bundle.mode, None, None, w)
    if oracle_moments is not None:
        mu, sigma = oracle_moments
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        sigma = np.maximum(np.atleast_2d(np.asarray(sigma, dtype=np.float64)), bundle.sigma_min)
        if mu.shape[0] == 1 and b > 1:
            mu = np.broadcast_to(mu, (b, mu.shape[1])).copy()
            sigma = np.broadcast_to(sigma, (b, sigma.shape[1])).copy()
    else:
        if bundle.h is None:
            raise ValueError(f"mode {bundle.mode.value} needs a moment model or oracle moments")
        mu, sigma = predict_moments_batch(bundle.h.spec, bundle.h.params, ctx_feats, bundle.sigma_min)
    return conditioning_for_mode(bundle.mode, mu, sigma, w)


def sample_batch(
    bundle: GenerativeBundle,
    ctx_feats: np.ndarray,
    spec: SolverSpec,
    rng: np.random.Generator,
    oracle_moments=None,
    velocity_fn=None,
):
    """Draw one sample per context row; returns (samples (B, D), nfe).

    Executes the full pipeline: moments, warmth blending, a standard-normal
    start in normalised space, ODE integration over the grid, the exact jump
    to s=0, and unnormalisation. ``velocity_fn`` overrides the network (used
    with oracle fields in tests).
    """
    ctx_feats = np.atleast_2d(np.asarray(ctx_feats, dtype=np.float64))
    b = ctx_feats.shape[0]
    d = bundle.sample_dim
    if d <= 0:
        raise ValueError("bundle.sample_dim must be set")
    cond = prepare_conditioning(bundle, ctx_feats, spec, oracle_moments)
    z = rng.standard_normal((b, d))
    if velocity_fn is None:
        p = bundle.p
        velocity_fn = lambda x, s: predict_velocity(p.spec, p.params, bundle.mode, x, ctx_feats, cond, s)
    res = integrate(velocity_fn, z, spec)
    x0n = finish_to_zero(res.x, res.s_end, res.last_velocity)
    return x0n * cond.sigma_norm + cond.mu_shift, res.eval_count


def sample_warm_start(
    bundle: GenerativeBundle,
    context_feats,
    spec: SolverSpec,
    rng: np.random.Generator,
    oracle_moments=None,
) -> Field:
    """Generate one sample for a single context; returns a Field of length D."""
    ctx = np.asarray(context_feats, dtype=np.float64).ravel()
    out, _ = sample_batch(bundle, ctx[None, :], spec, rng, oracle_moments=oracle_moments)
    return Field(out[0], (bundle.sample_dim,))
