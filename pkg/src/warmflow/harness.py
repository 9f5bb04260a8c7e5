"""Experiment orchestration: declarative configs, two-phase training with a
frozen moment model and a per-sample moment cache, NFE sweeps with
best-per-NFE selection, autoregressive rollout evaluation, and CSV/SVG
reporting. Every run is a pure function of (config, seed)."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, nn, solvers, svg, tasks, warmstart
from .flowmatch import (
    TrainBatch,
    TrainMode,
    train_velocity_model,
    velocity_input_dim,
)

log = logging.getLogger("warmflow")

CSV_COLUMNS = (
    "run_id", "task", "mode", "method", "grid", "nfe", "warmth",
    "metric_name", "value", "n_samples", "seed",
)

# warm-start model must stay well below the generative model's cost
MAX_H_TO_P_PARAM_RATIO = 0.2


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepSettings:
    nfe: tuple[int, ...] = (2, 4, 6, 8, 12, 16, 20, 100)
    methods: tuple[str, ...] = ("midpoint", "dpm2", "dpm3")
    grids: tuple[str, ...] = ("uniform", "log_snr")
    warmth: tuple[float, ...] = (1.0,)
    n_contexts: int = 48
    n_samples_per_context: int = 32
    eval_seed: int = 2024

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSettings":
        d = dict(d)
        for k in ("nfe", "methods", "grids", "warmth"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "inpainting"
    task_params: tuple = ()  # sorted (key, value) pairs
    mode: str = "warm_blended"
    seed: int = 0
    sigma_min: float = 0.01
    activation: str = "silu"
    embed_dim: int = 32
    h_hidden: tuple[int, ...] = (40,)
    p_hidden: tuple[int, ...] = (128, 128)
    n_train: int = 4096
    use_oracle_moments: bool = False
    use_ema_at_eval: bool = True
    s_min: float = solvers.DEFAULT_S_MIN
    s_max: float = solvers.DEFAULT_S_MAX
    h_train: nn.TrainHyper = field(default_factory=nn.TrainHyper)
    p_train: nn.TrainHyper = field(default_factory=nn.TrainHyper)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    out_dir: str = "runs"

    def task_param_dict(self) -> dict:
        return {k: v for k, v in self.task_params}

    def to_dict(self) -> dict:
        return {
            **{
                f.name: getattr(self, f.name)
                for f in dataclasses.fields(self)
                if f.name not in ("h_train", "p_train", "sweep", "task_params", "h_hidden", "p_hidden")
            },
            "task_params": {k: v for k, v in self.task_params},
            "h_hidden": list(self.h_hidden),
            "p_hidden": list(self.p_hidden),
            "h_train": self.h_train.to_dict(),
            "p_train": self.p_train.to_dict(),
            "sweep": self.sweep.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["task_params"] = freeze_params(d.get("task_params", {}))
        d["h_hidden"] = tuple(d.get("h_hidden", (40,)))
        d["p_hidden"] = tuple(d.get("p_hidden", (128, 128)))
        if "h_train" in d:
            d["h_train"] = nn.TrainHyper.from_dict(d["h_train"])
        if "p_train" in d:
            d["p_train"] = nn.TrainHyper.from_dict(d["p_train"])
        if "sweep" in d:
            d["sweep"] = SweepSettings.from_dict(d["sweep"])
        return cls(**d)

    @classmethod
    def from_json(cls, path: Path | str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_json(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def freeze_params(params) -> tuple:
    """Canonical hashable form for task parameter dicts."""
    if isinstance(params, tuple):
        params = dict(params)
    out = []
    for k in sorted(params):
        v = params[k]
        if isinstance(v, list):
            v = tuple(v)
        out.append((k, v))
    return tuple(out)


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_id(config: ExperimentConfig) -> str:
    return f"{config.task}-{config.mode}-s{config.seed}-{config_hash(config)}"


# ---------------------------------------------------------------------------
# Task and model wiring


def build_task(config: ExperimentConfig):
    params = config.task_param_dict()
    if config.task == "analytic":
        if "joint_cov" in params and params["joint_cov"] is not None:
            params["joint_cov"] = tuple(map(tuple, params["joint_cov"]))
        return tasks.AnalyticGaussianTask(tasks.AnalyticTaskConfig(**params))
    if config.task == "inpainting":
        if "visible_range" in params:
            params["visible_range"] = tuple(params["visible_range"])
        return tasks.GrfInpaintingTask(tasks.GrfTaskConfig(**params))
    if config.task == "forecast":
        return tasks.SpectralForecastTask(tasks.SpectralTaskConfig(**params))
    raise ValueError(f"unknown task {config.task!r}")


def train_mode(config: ExperimentConfig) -> TrainMode:
    return TrainMode(config.mode)


def h_model_spec(config: ExperimentConfig, task) -> nn.MlpSpec:
    return nn.MlpSpec(
        input_dim=task.context_dim,
        hidden_dims=config.h_hidden,
        output_dim=2 * task.sample_dim,
        activation=config.activation,
        embed_dim=config.embed_dim,
        n_scalars=0,
    )


def p_model_spec(config: ExperimentConfig, task) -> nn.MlpSpec:
    mode = train_mode(config)
    return nn.MlpSpec(
        input_dim=velocity_input_dim(mode, task.sample_dim, task.context_dim),
        hidden_dims=config.p_hidden,
        output_dim=task.sample_dim,
        activation=config.activation,
        embed_dim=config.embed_dim,
        n_scalars=2,
    )


def validate_config(config: ExperimentConfig) -> None:
    mode = train_mode(config)  # raises on unknown mode
    task = build_task(config)
    if mode is not TrainMode.BASELINE and not config.use_oracle_moments:
        h_n = nn.n_params(h_model_spec(config, task))
        p_n = nn.n_params(p_model_spec(config, task))
        if h_n > MAX_H_TO_P_PARAM_RATIO * p_n:
            raise ValueError(
                f"moment model too large: {h_n} params vs {p_n} "
                f"(limit {MAX_H_TO_P_PARAM_RATIO:.0%})"
            )


# ---------------------------------------------------------------------------
# Two-phase pipeline


@dataclass(frozen=True)
class PipelineArtifacts:
    run_dir: Path
    h_prefix: Path | None
    cache_path: Path | None
    p_prefix: Path
    manifest_path: Path


def _artifact_paths(config: ExperimentConfig, root: Path | None = None) -> PipelineArtifacts:
    root = Path(root) if root is not None else Path(config.out_dir)
    run_dir = root / run_id(config)
    needs_h = train_mode(config) is not TrainMode.BASELINE
    return PipelineArtifacts(
        run_dir=run_dir,
        h_prefix=(run_dir / "warmstart") if needs_h and not config.use_oracle_moments else None,
        cache_path=(run_dir / "moments.cache") if needs_h else None,
        p_prefix=run_dir / "velocity",
        manifest_path=run_dir / "manifest.json",
    )


def run_phase_one(config: ExperimentConfig, root: Path | None = None) -> PipelineArtifacts:
    """Train the moment model (unless the mode needs none), freeze it and
    cache per-sample moments for the whole training set."""
    validate_config(config)
    art = _artifact_paths(config, root)
    art.run_dir.mkdir(parents=True, exist_ok=True)
    mode = train_mode(config)
    task = build_task(config)
    if mode is TrainMode.BASELINE:
        log.info("baseline mode: no moment model, phase 1 skipped")
        return art

    data = tasks.build_dataset(task, config.seed, config.n_train)
    if config.use_oracle_moments:
        mus, sigmas = _oracle_moment_table(task, data, config.sigma_min)
        h_hash = "oracle"
    else:
        spec = h_model_spec(config, task)

        def provider(rng, b):
            idx = rng.integers(0, data.n_samples, size=b)
            return data.ctx[idx], data.x0[idx]

        state, history = warmstart.train_warm_start_model(spec, provider, config.h_train, config.seed)
        nn.save_checkpoint(
            art.h_prefix, spec, state,
            {"task": config.task, "seed": config.seed, "role": "warmstart",
             "ema_rate": config.h_train.ema_rate, "final_loss": history[-1], "steps": len(history)},
        )
        h_hash = nn.params_hash(state.params)
        mus, sigmas = _predict_moment_table(spec, state.params, data.ctx, config.sigma_min)

    warmstart.write_moment_cache(
        art.cache_path, mus, sigmas,
        task=config.task, dataset_seed=config.seed,
        sigma_min=config.sigma_min, h_checkpoint_hash=h_hash,
    )
    return art


def _predict_moment_table(spec, params, ctx, sigma_min, chunk=512):
    mus, sigmas = [], []
    for start in range(0, ctx.shape[0], chunk):
        mu, sig = warmstart.predict_moments_batch(spec, params, ctx[start : start + chunk], sigma_min)
        mus.append(mu)
        sigmas.append(sig)
    return np.concatenate(mus), np.concatenate(sigmas)


def _oracle_moment_table(task, data, sigma_min):
    mus, sigmas = [], []
    for context in data.contexts:
        mu, sig = task.oracle_conditional_moments(context)
        mus.append(mu)
        sigmas.append(np.maximum(sig, sigma_min))
    return np.stack(mus), np.stack(sigmas)


def run_phase_two(config: ExperimentConfig, root: Path | None = None) -> PipelineArtifacts:
    """Train the velocity model against cached moments (frozen phase 1)."""
    validate_config(config)
    art = _artifact_paths(config, root)
    art.run_dir.mkdir(parents=True, exist_ok=True)
    mode = train_mode(config)
    task = build_task(config)
    data = tasks.build_dataset(task, config.seed, config.n_train)

    if mode is TrainMode.BASELINE:
        mu_table = sigma_table = None
    else:
        if art.cache_path is None or not art.cache_path.exists():
            raise warmstart.CacheMissError(
                f"moment cache missing at {art.cache_path}; run phase 1 first"
            )
        cache = warmstart.MomentCache(art.cache_path)
        if cache.n_samples != data.n_samples:
            raise warmstart.CacheMissError("moment cache does not cover the training set")
        if art.h_prefix is not None:
            _, _, _, sidecar = nn.load_checkpoint(art.h_prefix)
            if sidecar["params_hash"] != cache.h_checkpoint_hash:
                raise warmstart.CacheMissError("moment cache is stale: checkpoint hash changed")
        mu_table, sigma_table = cache.get_batch(np.arange(data.n_samples))

    spec = p_model_spec(config, task)

    def provider(rng, b):
        idx = rng.integers(0, data.n_samples, size=b)
        if mu_table is None:
            return TrainBatch(x0=data.x0[idx], ctx=data.ctx[idx])
        return TrainBatch(
            x0=data.x0[idx], ctx=data.ctx[idx], mu=mu_table[idx], sigma=sigma_table[idx]
        )

    state, history = train_velocity_model(spec, provider, mode, config.p_train, config.seed)
    nn.save_checkpoint(
        art.p_prefix, spec, state,
        {"task": config.task, "mode": config.mode, "seed": config.seed, "role": "velocity",
         "ema_rate": config.p_train.ema_rate, "final_loss": history[-1], "steps": len(history)},
    )
    manifest = {
        "run_id": run_id(config),
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "p_steps": len(history),
        "p_final_loss": history[-1],
    }
    art.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return art


def run_pipeline(config: ExperimentConfig, root: Path | None = None) -> PipelineArtifacts:
    run_phase_one(config, root)
    return run_phase_two(config, root)


def load_bundle(config: ExperimentConfig, root: Path | None = None) -> solvers.GenerativeBundle:
    art = _artifact_paths(config, root)
    task = build_task(config)
    p_spec, p_params, p_ema, _ = nn.load_checkpoint(art.p_prefix)
    p = solvers.ModelHandle(p_spec, p_ema if config.use_ema_at_eval else p_params)
    h = None
    if art.h_prefix is not None and Path(f"{art.h_prefix}.json").exists():
        h_spec, h_params, _, _ = nn.load_checkpoint(art.h_prefix)
        h = solvers.ModelHandle(h_spec, h_params)
    return solvers.GenerativeBundle(
        p=p, mode=train_mode(config), h=h, sigma_min=config.sigma_min, sample_dim=task.sample_dim
    )


# ---------------------------------------------------------------------------
# Evaluation: conditional energy distance with common random numbers


@dataclass(frozen=True, eq=False)
class EvalSuite:
    """Fixed contexts, reference conditional draws and oracle moments.

    Built once per sweep so every solver cell sees identical contexts,
    identical reference samples and identical start noise.
    """

    contexts: list
    ctx_feats: np.ndarray
    references: list
    oracle_moments: list
    eval_seed: int


def make_eval_suite(task, n_contexts: int, n_samples: int, eval_seed: int) -> EvalSuite:
    contexts, refs, moms = [], [], []
    for i in range(n_contexts):
        rng = np.random.default_rng(np.random.SeedSequence([eval_seed, 7001, i]))
        sample = task.draw(rng)
        contexts.append(sample.context)
        refs.append(task.oracle_conditional_sample(sample.context, rng, n_samples))
        moms.append(task.oracle_conditional_moments(sample.context))
    ctx_feats = np.stack([task.context_features(c) for c in contexts])
    return EvalSuite(contexts, ctx_feats, refs, moms, eval_seed)


def eval_energy_distance(
    bundle: solvers.GenerativeBundle,
    suite: EvalSuite,
    spec: solvers.SolverSpec,
    use_oracle_moments: bool = False,
) -> float:
    """Mean over contexts of the energy distance between generated samples
    and exact conditional references. Start noise is seeded per context only,
    so all solver cells share it."""
    n_samples = suite.references[0].shape[0]
    values = []
    for i in range(len(suite.contexts)):
        rng = np.random.default_rng(np.random.SeedSequence([suite.eval_seed, 7002, i]))
        ctx_rows = np.tile(suite.ctx_feats[i], (n_samples, 1))
        oracle = suite.oracle_moments[i] if use_oracle_moments else None
        gen, _ = solvers.sample_batch(bundle, ctx_rows, spec, rng, oracle_moments=oracle)
        values.append(metrics.energy_distance(gen, suite.references[i]))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Sweeps


@dataclass(frozen=True)
class SweepRow:
    nfe: int
    method: str
    grid: str
    warmth: float
    metric_name: str
    value: float
    n_samples: int


@dataclass(frozen=True, eq=False)
class SweepResult:
    rows: list

    def best_per_nfe(self, metric_name: str = "energy_distance") -> dict[int, SweepRow]:
        best: dict[int, SweepRow] = {}
        for row in self.rows:
            if row.metric_name != metric_name:
                continue
            if row.nfe not in best or row.value < best[row.nfe].value:
                best[row.nfe] = row
        return best


def run_sweep(
    config: ExperimentConfig,
    root: Path | None = None,
    suite: EvalSuite | None = None,
) -> SweepResult:
    """Evaluate every (nfe, method, grid, warmth) cell; incompatible budget
    cells are skipped and logged."""
    bundle = load_bundle(config, root)
    task = build_task(config)
    sw = config.sweep
    if suite is None:
        suite = make_eval_suite(task, sw.n_contexts, sw.n_samples_per_context, sw.eval_seed)
    rows = []
    for nfe in sw.nfe:
        for method in sw.methods:
            for grid in sw.grids:
                for w in sw.warmth:
                    try:
                        spec = solvers.make_solver_spec(
                            method, grid, nfe, w, config.s_min, config.s_max
                        )
                    except solvers.BudgetError as exc:
                        log.info("skipping cell nfe=%s method=%s: %s", nfe, method, exc)
                        continue
                    value = eval_energy_distance(
                        bundle, suite, spec, use_oracle_moments=config.use_oracle_moments
                    )
                    rows.append(SweepRow(
                        nfe=nfe, method=method, grid=grid, warmth=w,
                        metric_name="energy_distance", value=value,
                        n_samples=sw.n_contexts * sw.n_samples_per_context,
                    ))
    return SweepResult(rows=rows)


# ---------------------------------------------------------------------------
# Rollout evaluation (forecast task)


def run_rollout_eval(
    config: ExperimentConfig,
    nfe_list,
    n_ensemble: int = 50,
    n_steps: int = 20,
    n_contexts: int = 4,
    method: str = "midpoint",
    grid: str = "uniform",
    root: Path | None = None,
) -> SweepResult:
    """CRPS and spectrum-ratio curves over autoregressive ensembles.

    Per context: one realised ground-truth trajectory scores the CRPS, and an
    equally sized ground-truth ensemble anchors the power-spectrum ratio.
    Member seeds are fixed per (context, member), so all NFE cells share
    their noise streams.
    """
    task = build_task(config)
    if not isinstance(task, tasks.SpectralForecastTask):
        raise ValueError("rollout evaluation requires the forecast task")
    bundle = load_bundle(config, root)
    eval_seed = config.sweep.eval_seed

    setups = []
    for c in range(n_contexts):
        rng = np.random.default_rng(np.random.SeedSequence([eval_seed, 7101, c]))
        u0 = task.draw_stationary(rng)
        u1 = task.step(None, u0, rng)
        context = tasks.ForecastContext(prev=u0, now=u1)
        # realised truth continuation
        truth = [u1]
        prev, now = u0, u1
        t_rng = np.random.default_rng(np.random.SeedSequence([eval_seed, 7102, c]))
        for _ in range(n_steps):
            nxt = task.step(prev, now, t_rng)
            truth.append(nxt)
            prev, now = now, nxt
        # ground-truth ensemble from the same start, for spectra
        truth_ens = []
        for m in range(n_ensemble):
            e_rng = np.random.default_rng(np.random.SeedSequence([eval_seed, 7103, c, m]))
            prev, now = u0, u1
            states = []
            for _ in range(n_steps):
                nxt = task.step(prev, now, e_rng)
                states.append(nxt)
                prev, now = now, nxt
            truth_ens.append(np.stack(states))
        member_seeds = [int(np.random.SeedSequence([eval_seed, 7104, c, m]).generate_state(1)[0])
                        for m in range(n_ensemble)]
        setups.append((context, np.stack(truth[1:]), np.stack(truth_ens), member_seeds))

    rows = []
    for nfe in nfe_list:
        try:
            spec = solvers.make_solver_spec(method, grid, int(nfe), 1.0, config.s_min, config.s_max)
        except solvers.BudgetError as exc:
            log.info("skipping rollout nfe=%s: %s", nfe, exc)
            continue
        crps_leads = np.zeros(n_steps)
        spectrum_summaries = []
        eta_mins, eta_maxs = [], []
        for context, truth_path, truth_ens, member_seeds in setups:
            result = tasks.rollout(bundle, context, n_steps, n_ensemble, spec, member_seeds)
            pred = result.trajectories[:, 2:, :]  # (E, n_steps, n)
            for t in range(n_steps):
                crps_leads[t] += metrics.crps_ensemble(pred[:, t, :], truth_path[t])
            ratio = metrics.power_spectrum_ratio(
                pred.reshape(-1, task.config.n), truth_ens.reshape(-1, task.config.n)
            )
            spectrum_summaries.append(ratio.summary)
            eta_mins.append(float(ratio.eta.min()))
            eta_maxs.append(float(ratio.eta.max()))
        crps_leads /= n_contexts
        n_eval = n_contexts * n_ensemble

        def add(name, value):
            rows.append(SweepRow(
                nfe=int(nfe), method=method, grid=grid, warmth=1.0,
                metric_name=name, value=float(value), n_samples=n_eval,
            ))

        add("crps", float(np.mean(crps_leads)))
        for t in range(n_steps):
            add(f"crps_lead_{t + 1:02d}", crps_leads[t])
        add("spectrum_summary", float(np.mean(spectrum_summaries)))
        add("eta_min", float(np.mean(eta_mins)))
        add("eta_max", float(np.mean(eta_maxs)))
    return SweepResult(rows=rows)


# ---------------------------------------------------------------------------
# Cost accounting


def compute_rollout_cost(n_ensemble: int, horizon_days: int, steps_per_day: int, nfe: int) -> int:
    """Total forward passes of the generative model for a full ensemble run."""
    vals = (n_ensemble, horizon_days, steps_per_day, nfe)
    if any(int(v) <= 0 or int(v) != v for v in vals):
        raise ValueError("all cost factors must be positive integers")
    return int(n_ensemble) * int(horizon_days) * int(steps_per_day) * int(nfe)


# ---------------------------------------------------------------------------
# Reporting


def rows_to_records(config: ExperimentConfig, result: SweepResult) -> list[dict]:
    rid = run_id(config)
    return [
        {
            "run_id": rid, "task": config.task, "mode": config.mode,
            "method": r.method, "grid": r.grid, "nfe": r.nfe, "warmth": r.warmth,
            "metric_name": r.metric_name, "value": r.value,
            "n_samples": r.n_samples, "seed": config.seed,
        }
        for r in result.rows
    ]


def write_metric_csv(path: Path | str, records: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rec in records:
            rec = dict(rec)
            rec["value"] = repr(float(rec["value"]))
            rec["warmth"] = repr(float(rec["warmth"]))
            writer.writerow(rec)


def read_metric_csv(path: Path | str) -> list[dict]:
    with Path(path).open() as fh:
        out = []
        for rec in csv.DictReader(fh):
            rec["nfe"] = int(rec["nfe"])
            rec["warmth"] = float(rec["warmth"])
            rec["value"] = float(rec["value"])
            rec["n_samples"] = int(rec["n_samples"])
            rec["seed"] = int(rec["seed"])
            out.append(rec)
        return out


def emit_report(records: list[dict], out_dir: Path | str, stem: str) -> list[Path]:
    """Write one CSV plus one SVG per metric family (series per mode, using
    the best value per NFE within each mode). Empty input raises."""
    if not records:
        raise PipelineError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = out_dir / f"{stem}.metrics.csv"
    write_metric_csv(csv_path, records)
    written.append(csv_path)

    metric_names = sorted({r["metric_name"] for r in records if not r["metric_name"].startswith("crps_lead")})
    for name in metric_names:
        series = []
        modes = sorted({r["mode"] for r in records})
        for mode in modes:
            best: dict[int, float] = {}
            for r in records:
                if r["metric_name"] != name or r["mode"] != mode:
                    continue
                if r["nfe"] not in best or r["value"] < best[r["nfe"]]:
                    best[r["nfe"]] = r["value"]
            if best:
                xs = sorted(best)
                series.append((mode, xs, [best[x] for x in xs]))
        if not series:
            continue
        svg_path = out_dir / f"{stem}.{name}.svg"
        svg.line_plot(series, svg_path, title=name, xlabel="NFE", ylabel=name)
        written.append(svg_path)
    return written
