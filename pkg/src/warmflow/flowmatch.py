"""Conditional flow matching in per-instance normalised space.

The probability path is the linear interpolation x_s = (1-s)*x0 + s*eps with
s=0 at data and s=1 at noise; the regression target is the constant velocity
eps - x0. Training modes cover the full method, its ablations and a plain
baseline; they differ only in how the target is normalised and which
conditioning channels the network sees.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .fields import Field, ShapeError
from . import nn
from .warmstart import blend_sigma_array

N_SCALAR_CHANNELS = 2  # path time s and warmth w


class TrainMode(enum.Enum):
    WARM_BLENDED = "warm_blended"
    WARM_NO_BLEND = "warm_no_blend"
    MEAN_ONLY = "mean_only"
    FEATURES_ONLY = "features_only"
    BASELINE = "baseline"


MODES_NEEDING_MOMENTS = (
    TrainMode.WARM_BLENDED,
    TrainMode.WARM_NO_BLEND,
    TrainMode.MEAN_ONLY,
    TrainMode.FEATURES_ONLY,
)


def mode_uses_moment_inputs(mode: TrainMode) -> bool:
    return mode is not TrainMode.BASELINE


def velocity_input_dim(mode: TrainMode, sample_dim: int, context_dim: int) -> int:
    base = sample_dim + context_dim
    return base + 2 * sample_dim if mode_uses_moment_inputs(mode) else base


# ---------------------------------------------------------------------------
# Probability path


@dataclass(frozen=True, eq=False)
class PathPoint:
    s: float
    x_s: Field
    velocity_target: Field
    noise: Field


def make_path_point(x0_norm: Field, s: float, rng: np.random.Generator) -> PathPoint:
    """Linear-path point at time s with freshly drawn standard normal noise."""
    if not 0.0 <= s <= 1.0:
        raise ValueError("path time s must lie in [0, 1]")
    eps = rng.standard_normal(x0_norm.size)
    x_s = (1.0 - s) * x0_norm.data + s * eps
    return PathPoint(
        s=float(s),
        x_s=x0_norm.with_data(x_s),
        velocity_target=x0_norm.with_data(eps - x0_norm.data),
        noise=x0_norm.with_data(eps),
    )


def velocity_to_noise_pred(v: Field, x_s: Field, s: float) -> Field:
    """eps_hat = x_s + (1-s)*v; exact under the linear path."""
    return x_s.with_data(x_s.data + (1.0 - s) * v.data)


def velocity_to_x0_pred(v: Field, x_s: Field, s: float) -> Field:
    """x0_hat = x_s - s*v; exact under the linear path."""
    return x_s.with_data(x_s.data - s * v.data)


def noise_pred_array(v: np.ndarray, x_s: np.ndarray, s) -> np.ndarray:
    return x_s + (1.0 - s) * v


def x0_pred_array(v: np.ndarray, x_s: np.ndarray, s) -> np.ndarray:
    return x_s - s * v


# ---------------------------------------------------------------------------
# Mode wiring


@dataclass(frozen=True)
class ModeConditioning:
    """Per-sample conditioning derived from predicted moments and warmth.

    mu_shift / sigma_norm define the (un)normalisation; mu_feed / sigma_feed
    are the channels handed to the network (None for the baseline).
    """

    mu_shift: np.ndarray
    sigma_norm: np.ndarray
    mu_feed: np.ndarray | None
    sigma_feed: np.ndarray | None
    warmth: np.ndarray


def draw_warmth(mode: TrainMode, n: int, rng: np.random.Generator) -> np.ndarray:
    if mode is TrainMode.WARM_BLENDED:
        return rng.uniform(0.0, 1.0, size=n)
    if mode is TrainMode.BASELINE:
        return np.zeros(n)
    return np.ones(n)


def conditioning_for_mode(
    mode: TrainMode,
    mu: np.ndarray | None,
    sigma: np.ndarray | None,
    warmth: np.ndarray,
) -> ModeConditioning:
    """Resolve normalisation and input channels for one batch.

    mu/sigma: (B, D) predicted moments (sigma already clamped), or None for
    the baseline.
    """
    warmth = np.asarray(warmth, dtype=np.float64)
    if mode is TrainMode.BASELINE:
        if warmth.ndim != 1:
            raise ShapeError("warmth must be a per-sample vector")
        d = None
        return ModeConditioning(
            mu_shift=np.zeros(1), sigma_norm=np.ones(1), mu_feed=d, sigma_feed=d, warmth=warmth
        )
    if mu is None or sigma is None:
        raise ValueError(f"mode {mode.value} requires predicted moments")
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    ones = np.ones_like(sigma)
    if mode in (TrainMode.WARM_BLENDED, TrainMode.WARM_NO_BLEND):
        sigma_norm = blend_sigma_array(sigma, warmth)
        return ModeConditioning(mu, sigma_norm, mu, sigma_norm, warmth)
    if mode is TrainMode.MEAN_ONLY:
        return ModeConditioning(mu, ones, mu, ones, warmth)
    # features only: no normalisation, raw moments as extra channels
    return ModeConditioning(np.zeros_like(mu), ones, mu, sigma, warmth)


def assemble_inputs(
    mode: TrainMode,
    x: np.ndarray,
    ctx: np.ndarray,
    cond: ModeConditioning,
) -> np.ndarray:
    if mode is TrainMode.BASELINE:
        return np.concatenate([x, ctx], axis=1)
    return np.concatenate([x, ctx, cond.mu_feed, cond.sigma_feed], axis=1)


def predict_velocity(
    spec: nn.MlpSpec,
    params: np.ndarray,
    mode: TrainMode,
    x: np.ndarray,
    ctx: np.ndarray,
    cond: ModeConditioning,
    s,
) -> np.ndarray:
    """Batched velocity query at path time(s) s with the mode's wiring."""
    x = np.atleast_2d(x)
    s_col = np.broadcast_to(np.asarray(s, dtype=np.float64), (x.shape[0],))
    w_col = np.broadcast_to(cond.warmth, (x.shape[0],))
    scalars = np.stack([s_col, w_col], axis=1)
    inputs = assemble_inputs(mode, x, ctx, cond)
    out, _ = nn.forward_batch(spec, params, inputs, scalars)
    return out


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True, eq=False)
class TrainBatch:
    """One batch of (context, target) pairs plus cached moments."""

    x0: np.ndarray
    ctx: np.ndarray
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None


def train_step(
    spec: nn.MlpSpec,
    state: nn.TrainState,
    batch: TrainBatch,
    mode: TrainMode,
    rng: np.random.Generator,
    hyper: nn.TrainHyper,
):
    """One velocity-regression step; returns (new state, batch loss).

    Draws per-sample warmth and path time, normalises the targets per the
    mode, regresses the predicted velocity onto eps - x0' with mean squared
    error over batch and dimensions, and applies one AdamW update.
    """
    b, d = batch.x0.shape
    w = draw_warmth(mode, b, rng)
    cond = conditioning_for_mode(mode, batch.mu, batch.sigma, w)
    x0n = (batch.x0 - cond.mu_shift) / cond.sigma_norm

    s = rng.uniform(0.0, 1.0, size=b)
    eps = rng.standard_normal((b, d))
    x_s = (1.0 - s[:, None]) * x0n + s[:, None] * eps
    target = eps - x0n

    scalars = np.stack([s, w], axis=1)
    inputs = assemble_inputs(mode, x_s, batch.ctx, cond)
    pred, cache = nn.forward_batch(spec, state.params, inputs, scalars, want_cache=True)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grads = nn.backward_batch(spec, state.params, cache, 2.0 * diff / diff.size)
    state = nn.adamw_step(
        state,
        grads,
        lr=hyper.lr,
        betas=hyper.betas,
        weight_decay=hyper.weight_decay,
        clip_norm=hyper.clip_norm,
        ema_rate=hyper.ema_rate,
    )
    return state, loss


def train_velocity_model(
    spec: nn.MlpSpec,
    batch_provider,
    mode: TrainMode,
    hyper: nn.TrainHyper,
    seed: int,
):
    """Train until plateau or step cap. batch_provider(rng, n) -> TrainBatch."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF10]))
    state = nn.init_train_state(nn.init_params(spec, rng))
    plateau = nn.PlateauDetector(hyper.plateau_window, hyper.plateau_tol)
    history = []
    for _ in range(hyper.max_steps):
        batch = batch_provider(rng, hyper.batch_size)
        state, loss = train_step(spec, state, batch, mode, rng, hyper)
        if not np.isfinite(loss):
            raise FloatingPointError("velocity regression diverged")
        history.append(loss)
        if plateau.update(loss):
            break
    return state, history
