"""Minimal reverse-mode MLP stack: forward, backward, AdamW with EMA, checkpoints.

Networks are MLPs whose hidden layers can be modulated by scalar conditioning
channels (e.g. a path time and a warmth value). Each scalar is embedded
sinusoidally and injected per layer as a feature-wise shift and scale applied
to the pre-activations. Parameters live in a single flat float64 vector so the
optimiser, EMA and checkpoints stay trivial.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .fields import Field, ShapeError

ACTIVATIONS = ("relu", "silu", "tanh")

_EMBED_MAX_FREQ = 1000.0


class NonFiniteGradientError(RuntimeError):
    """Raised when an optimiser step receives NaN/Inf gradients."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one network; fully determines the parameter layout."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "silu"
    embed_dim: int = 32
    n_scalars: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be non-empty with entries >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_scalars < 0:
            raise ValueError("n_scalars must be >= 0")
        if self.n_scalars > 0 and (self.embed_dim < 2 or self.embed_dim % 2):
            raise ValueError("embed_dim must be a positive even number")

    @property
    def embed_total(self) -> int:
        return self.n_scalars * self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        d = dict(d)
        d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


@functools.lru_cache(maxsize=None)
def _layout(spec: MlpSpec) -> tuple[tuple[tuple[str, tuple[int, ...], int, int], ...], int]:
    """Flat-vector layout: ((name, shape, start, stop), ...), total length."""
    entries = []
    offset = 0

    def add(name, shape):
        nonlocal offset
        n = int(np.prod(shape))
        entries.append((name, shape, offset, offset + n))
        offset += n

    fan_in = spec.input_dim
    e = spec.embed_total
    for i, h in enumerate(spec.hidden_dims):
        add(f"w{i}", (h, fan_in))
        add(f"b{i}", (h,))
        if e:
            add(f"film_scale_w{i}", (h, e))
            add(f"film_scale_b{i}", (h,))
            add(f"film_shift_w{i}", (h, e))
            add(f"film_shift_b{i}", (h,))
        fan_in = h
    add("w_out", (spec.output_dim, fan_in))
    add("b_out", (spec.output_dim,))
    return tuple(entries), offset


def n_params(spec: MlpSpec) -> int:
    return _layout(spec)[1]


def _views(spec: MlpSpec, vec: np.ndarray) -> dict[str, np.ndarray]:
    entries, total = _layout(spec)
    if vec.shape != (total,):
        raise ShapeError(f"parameter vector has length {vec.size}, expected {total}")
    return {name: vec[a:b].reshape(shape) for name, shape, a, b in entries}


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Scaled-normal weights, zero biases, zero conditioning maps."""
    vec = np.zeros(n_params(spec), dtype=np.float64)
    views = _views(spec, vec)
    for name, arr in views.items():
        if name.startswith("w") and not name.startswith("w_out"):
            arr[:] = rng.standard_normal(arr.shape) / np.sqrt(arr.shape[1])
        elif name == "w_out":
            arr[:] = rng.standard_normal(arr.shape) / np.sqrt(arr.shape[1])
        # biases and film maps stay zero: scalars start inert
    return vec


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    # silu
    return z / (1.0 + np.exp(-z))


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@functools.lru_cache(maxsize=None)
def _embed_freqs(embed_dim: int) -> np.ndarray:
    half = embed_dim // 2
    if half == 1:
        return np.ones(1)
    return np.exp(np.linspace(0.0, np.log(_EMBED_MAX_FREQ), half))


def scalar_embedding(scalars: np.ndarray, embed_dim: int) -> np.ndarray:
    """Sinusoidal features for each scalar channel, concatenated.

    scalars: (B, n_scalars) values in [0, 1]. Returns (B, n_scalars*embed_dim).
    """
    scalars = np.atleast_2d(np.asarray(scalars, dtype=np.float64))
    freqs = _embed_freqs(embed_dim)
    ang = scalars[:, :, None] * freqs[None, None, :]  # (B, S, half)
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=2)  # (B, S, embed_dim)
    return emb.reshape(scalars.shape[0], -1)


def forward_batch(
    spec: MlpSpec,
    params: np.ndarray,
    x: np.ndarray,
    scalars: np.ndarray | None = None,
    want_cache: bool = False,
):
    """Batched forward pass. x: (B, input_dim); scalars: (B, n_scalars) or None.

    Returns (y, cache); cache is None unless requested.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input has shape {x.shape}, expected (B, {spec.input_dim})")
    p = _views(spec, params)
    if spec.n_scalars:
        if scalars is None:
            raise ShapeError("spec declares scalar channels but none were given")
        scalars = np.asarray(scalars, dtype=np.float64)
        if scalars.ndim == 1:
            scalars = np.broadcast_to(scalars, (x.shape[0], scalars.size))
        if scalars.shape != (x.shape[0], spec.n_scalars):
            raise ShapeError(
                f"scalars have shape {scalars.shape}, expected ({x.shape[0]}, {spec.n_scalars})"
            )
        e = scalar_embedding(scalars, spec.embed_dim)
    else:
        e = None

    layers = []
    h = x
    for i in range(len(spec.hidden_dims)):
        z = h @ p[f"w{i}"].T + p[f"b{i}"]
        if e is not None:
            scale = e @ p[f"film_scale_w{i}"].T + p[f"film_scale_b{i}"]
            shift = e @ p[f"film_shift_w{i}"].T + p[f"film_shift_b{i}"]
            zf = z * (1.0 + scale) + shift
        else:
            scale = None
            zf = z
        a = _act(spec.activation, zf)
        if want_cache:
            layers.append((h, z, scale, zf))
        h = a
    y = h @ p["w_out"].T + p["b_out"]
    cache = (layers, h, e) if want_cache else None
    return y, cache


def backward_batch(
    spec: MlpSpec,
    params: np.ndarray,
    cache,
    upstream: np.ndarray,
) -> np.ndarray:
    """Gradient of <upstream, forward(...)> w.r.t. the flat parameter vector."""
    layers, h_last, e = cache
    p = _views(spec, params)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (h_last.shape[0], spec.output_dim):
        raise ShapeError(
            f"upstream has shape {upstream.shape}, expected ({h_last.shape[0]}, {spec.output_dim})"
        )
    grads = np.zeros_like(params)
    g = _views(spec, grads)

    g["w_out"][:] = upstream.T @ h_last
    g["b_out"][:] = upstream.sum(axis=0)
    dh = upstream @ p["w_out"]

    for i in reversed(range(len(spec.hidden_dims))):
        h_in, z, scale, zf = layers[i]
        dzf = dh * _act_grad(spec.activation, zf)
        if scale is not None:
            dscale = dzf * z
            g[f"film_scale_w{i}"][:] = dscale.T @ e
            g[f"film_scale_b{i}"][:] = dscale.sum(axis=0)
            g[f"film_shift_w{i}"][:] = dzf.T @ e
            g[f"film_shift_b{i}"][:] = dzf.sum(axis=0)
            dz = dzf * (1.0 + scale)
        else:
            dz = dzf
        g[f"w{i}"][:] = dz.T @ h_in
        g[f"b{i}"][:] = dz.sum(axis=0)
        dh = dz @ p[f"w{i}"]
    return grads


def forward(spec: MlpSpec, params: np.ndarray, input: Field, scalars=()) -> Field:
    """Single-sample forward pass over a Field."""
    scalars = np.asarray(list(scalars), dtype=np.float64)
    if scalars.size != spec.n_scalars:
        raise ShapeError(f"expected {spec.n_scalars} scalars, got {scalars.size}")
    if scalars.size and (scalars.min() < 0.0 or scalars.max() > 1.0):
        raise ValueError("conditioning scalars must lie in [0, 1]")
    x = input.data if isinstance(input, Field) else np.asarray(input, dtype=np.float64).ravel()
    if x.size != spec.input_dim:
        raise ShapeError(f"input has length {x.size}, expected {spec.input_dim}")
    y, _ = forward_batch(spec, params, x[None, :], scalars[None, :] if scalars.size else None)
    return Field(y[0], (spec.output_dim,))


def backward(spec: MlpSpec, params: np.ndarray, input: Field, scalars, upstream_grad: Field) -> np.ndarray:
    """d<upstream_grad, forward(input)>/dparams for a single sample."""
    scalars = np.asarray(list(scalars), dtype=np.float64)
    if scalars.size != spec.n_scalars:
        raise ShapeError(f"expected {spec.n_scalars} scalars, got {scalars.size}")
    x = input.data if isinstance(input, Field) else np.asarray(input, dtype=np.float64).ravel()
    u = upstream_grad.data if isinstance(upstream_grad, Field) else np.asarray(upstream_grad).ravel()
    if u.size != spec.output_dim:
        raise ShapeError(f"upstream has length {u.size}, expected {spec.output_dim}")
    _, cache = forward_batch(
        spec, params, x[None, :], scalars[None, :] if scalars.size else None, want_cache=True
    )
    return backward_batch(spec, params, cache, u[None, :])


# ---------------------------------------------------------------------------
# Optimiser state


@dataclass(frozen=True)
class TrainState:
    params: np.ndarray
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    ema: np.ndarray
    step: int = 0

    def __post_init__(self):
        n = self.params.size
        if not (self.exp_avg.size == self.exp_avg_sq.size == self.ema.size == n):
            raise ShapeError("parameter, moment and ema vectors must share one length")


def init_train_state(params: np.ndarray) -> TrainState:
    params = np.asarray(params, dtype=np.float64)
    return TrainState(
        params=params.copy(),
        exp_avg=np.zeros_like(params),
        exp_avg_sq=np.zeros_like(params),
        ema=params.copy(),
        step=0,
    )


def adamw_step(
    state: TrainState,
    grads: np.ndarray,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.0,
    clip_norm: float = 3.0,
    eps: float = 1e-8,
    ema_rate: float = 0.999,
) -> TrainState:
    """One AdamW update with global-norm clipping and EMA tracking.

    Raises NonFiniteGradientError (leaving the caller's state untouched) if
    the gradient contains NaN/Inf.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.params.shape:
        raise ShapeError(f"gradient length {grads.size} != parameter length {state.params.size}")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError("non-finite gradient; step rejected")

    if clip_norm is not None and clip_norm > 0:
        gnorm = float(np.linalg.norm(grads))
        if gnorm > clip_norm:
            grads = grads * (clip_norm / gnorm)

    b1, b2 = betas
    step = state.step + 1
    exp_avg = b1 * state.exp_avg + (1.0 - b1) * grads
    exp_avg_sq = b2 * state.exp_avg_sq + (1.0 - b2) * grads * grads
    m_hat = exp_avg / (1.0 - b1**step)
    v_hat = exp_avg_sq / (1.0 - b2**step)
    params = state.params - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * state.params)
    ema = ema_rate * state.ema + (1.0 - ema_rate) * params
    return TrainState(params=params, exp_avg=exp_avg, exp_avg_sq=exp_avg_sq, ema=ema, step=step)


@dataclass(frozen=True)
class TrainHyper:
    """Optimiser and schedule settings shared by both training phases."""

    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    clip_norm: float = 3.0
    ema_rate: float = 0.999
    batch_size: int = 128
    max_steps: int = 50_000
    plateau_window: int = 2000
    plateau_tol: float = 1e-3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


class PlateauDetector:
    """Windowed convergence check: stop when the mean loss over the last
    window improves on the window before it by less than rel_tol."""

    def __init__(self, window: int = 2000, rel_tol: float = 1e-3):
        self.window = int(window)
        self.rel_tol = float(rel_tol)
        self._buf: list[float] = []
        self._prev_mean: float | None = None
        self.converged = False

    def update(self, loss: float) -> bool:
        self._buf.append(float(loss))
        if len(self._buf) >= self.window:
            cur = float(np.mean(self._buf))
            self._buf.clear()
            if self._prev_mean is not None:
                improvement = (self._prev_mean - cur) / max(abs(self._prev_mean), 1e-8)
                if improvement < self.rel_tol:
                    self.converged = True
            self._prev_mean = cur
        return self.converged


# ---------------------------------------------------------------------------
# Checkpoints: raw little-endian float64 vectors + JSON sidecar


def params_hash(params: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(params, dtype="<f8").tobytes()).hexdigest()[:16]


def save_checkpoint(prefix: Path | str, spec: MlpSpec, state: TrainState, extra: dict | None = None) -> dict:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.params.bin").write_bytes(state.params.astype("<f8").tobytes())
    Path(f"{prefix}.ema.bin").write_bytes(state.ema.astype("<f8").tobytes())
    sidecar = {
        "spec": spec.to_dict(),
        "step": state.step,
        "params_hash": params_hash(state.params),
        **(extra or {}),
    }
    Path(f"{prefix}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar


def load_checkpoint(prefix: Path | str):
    """Returns (spec, params, ema, sidecar dict)."""
    prefix = Path(prefix)
    sidecar = json.loads(Path(f"{prefix}.json").read_text())
    spec = MlpSpec.from_dict(sidecar["spec"])
    params = np.frombuffer(Path(f"{prefix}.params.bin").read_bytes(), dtype="<f8").astype(np.float64)
    ema = np.frombuffer(Path(f"{prefix}.ema.bin").read_bytes(), dtype="<f8").astype(np.float64)
    if params.size != n_params(spec):
        raise ShapeError("checkpoint parameter vector does not match its spec")
    return spec, params, ema, sidecar
