"""Command-line entry points for training, sampling, sweeps and reports."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, solvers, tasks


def _load_config(path: str) -> harness.ExperimentConfig:
    return harness.ExperimentConfig.from_json(path)


def cmd_train_warmstart(args) -> int:
    config = _load_config(args.config)
    art = harness.run_phase_one(config)
    print(f"phase 1 done: {art.run_dir}")
    return 0


def cmd_train_gen(args) -> int:
    config = _load_config(args.config)
    art = harness.run_phase_two(config)
    print(f"phase 2 done: {art.manifest_path}")
    return 0


def cmd_sample(args) -> int:
    config = _load_config(args.config)
    bundle = harness.load_bundle(config)
    task = harness.build_task(config)
    spec = solvers.make_solver_spec(
        args.method, args.grid, args.nfe, args.warmth, config.s_min, config.s_max
    )
    rng = np.random.default_rng(np.random.SeedSequence([config.sweep.eval_seed, 9001, args.sample_seed]))
    sample = tasks.sample_at(task, config.sweep.eval_seed, args.sample_seed)
    ctx = task.context_features(sample.context)
    draws = []
    for i in range(args.n):
        draw_rng = np.random.default_rng(np.random.SeedSequence([config.sweep.eval_seed, 9002, args.sample_seed, i]))
        draws.append(solvers.sample_warm_start(bundle, ctx, spec, draw_rng).data)
    del rng
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    arr = np.stack(draws)
    out.write_bytes(arr.astype("<f8").tobytes())
    Path(f"{out}.json").write_text(json.dumps({
        "run_id": harness.run_id(config),
        "solver": json.loads(spec.to_json()),
        "n_samples": args.n,
        "sample_dim": bundle.sample_dim,
        "context_seed_index": args.sample_seed,
        "truth_available": True,
    }, indent=2, sort_keys=True))
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    result = harness.run_sweep(config)
    records = harness.rows_to_records(config, result)
    out_dir = Path(config.out_dir) / harness.run_id(config)
    written = harness.emit_report(records, out_dir, "sweep")
    for p in written:
        print(p)
    return 0


def cmd_rollout(args) -> int:
    config = _load_config(args.config)
    nfe_list = [int(v) for v in args.nfe.split(",")] if args.nfe else list(config.sweep.nfe)
    result = harness.run_rollout_eval(
        config, nfe_list, n_ensemble=args.ensemble, n_steps=args.steps
    )
    records = harness.rows_to_records(config, result)
    out_dir = Path(config.out_dir) / harness.run_id(config)
    written = harness.emit_report(records, out_dir, "rollout")
    for p in written:
        print(p)
    return 0


def cmd_report(args) -> int:
    records = []
    for path in sorted(Path(args.dir).rglob("*.metrics.csv")):
        records.extend(harness.read_metric_csv(path))
    written = harness.emit_report(records, Path(args.dir), "report")
    for p in written:
        print(p)
    return 0


def cmd_cost(args) -> int:
    total = harness.compute_rollout_cost(args.ensemble, args.days, args.steps_per_day, args.nfe)
    print(total)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warmflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-warmstart", help="phase 1: train and freeze the moment model")
    p.add_argument("config")
    p.set_defaults(fn=cmd_train_warmstart)

    p = sub.add_parser("train-gen", help="phase 2: train the velocity model against the cache")
    p.add_argument("config")
    p.set_defaults(fn=cmd_train_gen)

    p = sub.add_parser("sample", help="generate samples for one held-out context")
    p.add_argument("config")
    p.add_argument("--nfe", type=int, default=12)
    p.add_argument("--method", default="midpoint", choices=solvers.METHODS)
    p.add_argument("--grid", default="uniform", choices=solvers.GRID_KINDS)
    p.add_argument("--warmth", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--sample-seed", type=int, default=0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("sweep", help="NFE x solver x grid sweep with best-per-NFE report")
    p.add_argument("config")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("rollout", help="autoregressive ensemble evaluation (forecast task)")
    p.add_argument("config")
    p.add_argument("--ensemble", type=int, default=50)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--nfe", default="")
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("report", help="aggregate metric CSVs under a directory into plots")
    p.add_argument("dir")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("cost", help="forward-pass accounting for ensemble forecasts")
    p.add_argument("--ensemble", type=int, required=True)
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--steps-per-day", type=int, required=True)
    p.add_argument("--nfe", type=int, required=True)
    p.set_defaults(fn=cmd_cost)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # CLI contract: nonzero on any error path
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
