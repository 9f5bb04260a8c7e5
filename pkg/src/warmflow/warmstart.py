"""Deterministic warm-start model: moment prediction, Gaussian NLL training,
warmth blending and the per-instance normalisation that turns an informed
Gaussian prior into a standard normal one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import Field, ShapeError, as_flat
from . import nn

DEFAULT_SIGMA_MIN = 0.01

LOG_2PI = float(np.log(2.0 * np.pi))


class CacheMissError(KeyError):
    """A training sample has no cached moments."""


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


@dataclass(frozen=True, eq=False)
class Moments:
    """Predicted conditional mean and marginal standard deviation."""

    mu: Field
    sigma: Field

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError("mu and sigma must share one shape")
        if np.any(self.sigma.data <= 0.0):
            raise ValueError("sigma must be strictly positive")


def make_moments(mu, sigma, sigma_min: float = DEFAULT_SIGMA_MIN, shape=None) -> Moments:
    """Clamp sigma from below and wrap as Moments."""
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64).ravel(), sigma_min)
    shape = tuple(shape) if shape is not None else (mu.size,)
    return Moments(Field(mu, shape), Field(sigma, shape))


@dataclass(frozen=True, eq=False)
class BlendedSigma:
    """Standard deviation used for (un)normalisation at a given warmth."""

    sigma_norm: Field
    warmth: float

    def __post_init__(self):
        if not 0.0 <= self.warmth <= 1.0:
            raise ValueError("warmth must lie in [0, 1]")
        if np.any(self.sigma_norm.data <= 0.0):
            raise ValueError("sigma_norm must be strictly positive")


def blend_sigma_array(sigma: np.ndarray, warmth) -> np.ndarray:
    """w * max(sigma, 1-w) + (1-w); exact 1 at w=0 and exact sigma at w=1.

    warmth may be a scalar or a per-row array broadcast against sigma's
    leading axis.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    w = np.asarray(warmth, dtype=np.float64)
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise ValueError("warmth must lie in [0, 1]")
    if w.ndim == 1 and sigma.ndim == 2:
        w = w[:, None]
    return w * np.maximum(sigma, 1.0 - w) + (1.0 - w)


def blend_sigma(sigma: Field, warmth: float) -> BlendedSigma:
    out = blend_sigma_array(sigma.data, float(warmth))
    return BlendedSigma(sigma.with_data(out), float(warmth))


def normalise(x: Field, moments: Moments, sigma_norm: Field) -> Field:
    """(x - mu) / sigma_norm, element-wise."""
    return x.with_data((x.data - moments.mu.data) / sigma_norm.data)


def unnormalise(x_norm: Field, moments: Moments, sigma_norm: Field) -> Field:
    """Exact inverse of normalise: x_norm * sigma_norm + mu."""
    return x_norm.with_data(x_norm.data * sigma_norm.data + moments.mu.data)


def sample_informed_prior(moments: Moments, sigma_norm: Field, rng: np.random.Generator) -> Field:
    """Draw mu + sigma_norm * z with z standard normal."""
    z = rng.standard_normal(moments.mu.size)
    return moments.mu.with_data(moments.mu.data + sigma_norm.data * z)


# ---------------------------------------------------------------------------
# Moment head: raw network outputs -> (mu, sigma)


def moments_from_raw(raw: np.ndarray, sigma_min: float = DEFAULT_SIGMA_MIN):
    """Split raw head outputs (…, 2D) into mu (…, D) and clamped sigma (…, D)."""
    raw = np.asarray(raw, dtype=np.float64)
    d = raw.shape[-1]
    if d % 2:
        raise ShapeError("moment head output must have even length")
    half = d // 2
    mu = raw[..., :half]
    sigma = np.maximum(softplus(raw[..., half:]), sigma_min)
    return mu, sigma


def predict_moments_batch(
    spec: nn.MlpSpec,
    params: np.ndarray,
    contexts: np.ndarray,
    sigma_min: float = DEFAULT_SIGMA_MIN,
):
    """Batched moment prediction: contexts (B, C_in) -> mu, sigma (B, D)."""
    raw, _ = nn.forward_batch(spec, params, contexts)
    return moments_from_raw(raw, sigma_min)


def predict_moments(
    spec: nn.MlpSpec,
    params: np.ndarray,
    context: Field | np.ndarray,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    shape=None,
) -> Moments:
    ctx = as_flat(context)
    mu, sigma = predict_moments_batch(spec, params, ctx[None, :], sigma_min)
    return make_moments(mu[0], sigma[0], sigma_min=sigma_min, shape=shape)


# ---------------------------------------------------------------------------
# Gaussian negative log-likelihood


def nll_loss(moments: Moments, x0: Field) -> float:
    """Sum over dims of log sigma + 0.5*((x-mu)/sigma)^2 + 0.5*log(2*pi)."""
    if x0.shape != moments.mu.shape:
        raise ShapeError("x0 shape does not match the moments")
    z = (x0.data - moments.mu.data) / moments.sigma.data
    return float(np.sum(np.log(moments.sigma.data) + 0.5 * z * z + 0.5 * LOG_2PI))


def nll_loss_and_grad(
    raw: np.ndarray,
    x0: np.ndarray,
    sigma_min: float = DEFAULT_SIGMA_MIN,
):
    """Per-batch mean NLL and its gradient w.r.t. the raw head outputs.

    raw: (B, 2D) network outputs; x0: (B, D) targets. The sigma half goes
    through softplus then a lower clamp; clamped entries receive zero
    gradient. Returns (loss, grad) with grad shaped like raw.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    b, d2 = raw.shape
    d = d2 // 2
    if x0.shape != (b, d):
        raise ShapeError(f"x0 has shape {x0.shape}, expected ({b}, {d})")
    mu = raw[:, :d]
    raw_sigma = raw[:, d:]
    sp = softplus(raw_sigma)
    clamped = sp < sigma_min
    sigma = np.where(clamped, sigma_min, sp)

    err = x0 - mu
    z = err / sigma
    per_sample = np.sum(np.log(sigma) + 0.5 * z * z + 0.5 * LOG_2PI, axis=1)
    loss = float(np.mean(per_sample))

    dmu = -z / sigma / b
    dsigma = (1.0 / sigma - err * err / sigma**3) / b
    dsigma = np.where(clamped, 0.0, dsigma * _sigmoid(raw_sigma))
    return loss, np.concatenate([dmu, dsigma], axis=1)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# Warm-start training


def train_warm_start_model(
    spec: nn.MlpSpec,
    batch_provider,
    hyper: nn.TrainHyper,
    seed: int,
):
    """Train the moment model with Gaussian NLL until plateau or step cap.

    batch_provider(rng, batch_size) must yield (contexts (B, C), x0 (B, D)).
    Returns (TrainState, loss history). Raises if the loss goes non-finite.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57A7]))
    state = nn.init_train_state(nn.init_params(spec, rng))
    plateau = nn.PlateauDetector(hyper.plateau_window, hyper.plateau_tol)
    history = []
    for _ in range(hyper.max_steps):
        ctx, x0 = batch_provider(rng, hyper.batch_size)
        raw, cache = nn.forward_batch(spec, state.params, ctx, want_cache=True)
        loss, graw = nll_loss_and_grad(raw, x0)
        if not np.isfinite(loss):
            raise FloatingPointError("warm-start NLL diverged")
        grads = nn.backward_batch(spec, state.params, cache, graw)
        state = nn.adamw_step(
            state,
            grads,
            lr=hyper.lr,
            betas=hyper.betas,
            weight_decay=hyper.weight_decay,
            clip_norm=hyper.clip_norm,
            ema_rate=hyper.ema_rate,
        )
        history.append(loss)
        if plateau.update(loss):
            break
    return state, history


# ---------------------------------------------------------------------------
# Moment cache: one little-endian float64 record of (mu, sigma) per sample


def write_moment_cache(
    path: Path | str,
    mus: np.ndarray,
    sigmas: np.ndarray,
    *,
    task: str,
    dataset_seed: int,
    sigma_min: float,
    h_checkpoint_hash: str,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mus = np.asarray(mus, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if mus.shape != sigmas.shape or mus.ndim != 2:
        raise ShapeError("moment cache expects matching (N, D) arrays")
    records = np.stack([mus, sigmas], axis=1)  # (N, 2, D)
    path.write_bytes(records.astype("<f8").tobytes())
    manifest = {
        "task": task,
        "n_samples": int(mus.shape[0]),
        "dim": int(mus.shape[1]),
        "dataset_seed": int(dataset_seed),
        "sigma_min": float(sigma_min),
        "h_checkpoint_hash": h_checkpoint_hash,
    }
    Path(f"{path}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


class MomentCache:
    """Read-only access to cached per-sample moments."""

    def __init__(self, path: Path | str):
        path = Path(path)
        self.manifest = json.loads(Path(f"{path}.json").read_text())
        n, d = self.manifest["n_samples"], self.manifest["dim"]
        raw = np.frombuffer(path.read_bytes(), dtype="<f8")
        self._records = raw.reshape(n, 2, d)

    @property
    def n_samples(self) -> int:
        return int(self.manifest["n_samples"])

    @property
    def h_checkpoint_hash(self) -> str:
        return self.manifest["h_checkpoint_hash"]

    def get(self, index: int):
        """(mu, sigma) for one sample; raises CacheMissError out of range."""
        if not 0 <= index < self.n_samples:
            raise CacheMissError(f"no cached moments for sample {index}")
        rec = self._records[index]
        return rec[0], rec[1]

    def get_batch(self, indices: np.ndarray):
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_samples):
            raise CacheMissError("cache lookup out of range")
        rec = self._records[indices]
        return rec[:, 0, :], rec[:, 1, :]
