"""Command-line harness: ``laeo-lab {collect,train,eval,sweep,plan-cem,oracle-check}``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, dump_toml, load_config
from .critic import TrainingDivergedError
from .dataset import DatasetFormatError, dataset_path_pair, load_dataset, load_success_set
from .envs import GridWorldMDP, make_env
from .oracle import identity_checks
from .policy import GaussianPolicy, evaluate_policy

log = logging.getLogger("laeo_lab")

SWEEP_COLUMNS = ("axis", "value", "method", "n_seeds", "mean_success", "stderr", "status")


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([ex._cell(r[c]) if not isinstance(r[c], str) else r[c] for c in columns])
    path.write_text(buf.getvalue())


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("LAEO_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _load_data(cfg: ExperimentConfig):
    """Dataset files written by ``collect`` into ``out_dir`` win; otherwise generate them from the config."""
    data_path, success_path = dataset_path_pair(cfg.out_dir)
    if not cfg.dataset.path and data_path.exists() and success_path.exists():
        return load_dataset(data_path), load_success_set(success_path)
    ds = ex.make_dataset(cfg)
    return ds, ex.make_success_set(cfg, ds)


# --- subcommands --------------------------------------------------------------------


def cmd_collect(cfg: ExperimentConfig, args) -> int:
    data_path, success_path, ds, ss = ex.collect_to_disk(cfg)
    (Path(cfg.out_dir) / "config.resolved.toml").write_text(dump_toml(cfg))
    print(f"dataset: {data_path} ({len(ds)} trajectories, success rate {ds.success_rate():.3f}, "
          f"noise_std {ds.metadata.get('noise_std')})")
    print(f"success set: {success_path} ({len(ss)} states)")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    from .plotting import training_plot

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, ss = _load_data(cfg)
    store = ex.RunStore(out / "cache")
    results = ex.run_experiment(cfg, ds, ss, store)
    rows = [r for res in results for r in res.rows]
    (out / "metrics.csv").write_text(ex.metrics_csv(rows))
    (out / "config.resolved.toml").write_text(dump_toml(cfg))
    summary = [{"seed": r.seed, "method": r.method, "env_id": r.env_id, "success_rate": r.success_rate} for r in results]
    _write_csv(out / "summary.csv", ("seed", "method", "env_id", "success_rate"), summary)
    training_plot(ex.read_metrics_csv(out / f"seed_{cfg.seeds[0]}" / "metrics.csv"), out / "training.svg")
    mean, se = ex.summarize([r.success_rate for r in results])
    print(f"{cfg.method} on {cfg.env_id}: success {mean:.3f} +/- {se:.3f} over {len(results)} seed(s)")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    env = make_env(cfg.env_id)
    if isinstance(env, GridWorldMDP):
        raise ConfigError("eval reads Gaussian policy checkpoints; gridworld runs report success from train")
    paths = [Path(args.checkpoint)] if args.checkpoint else sorted(Path(cfg.out_dir).glob("seed_*/policy.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no policy checkpoints under {cfg.out_dir}")
    rows = []
    for k, path in enumerate(paths):
        policy = GaussianPolicy.load(path)
        seed = cfg.seeds[k % len(cfg.seeds)]
        rate = evaluate_policy(policy, env, cfg.eval_episodes, ex.eval_seed(seed), deterministic=args.deterministic)
        rows.append({"checkpoint": str(path), "episodes": cfg.eval_episodes, "success_rate": rate})
        print(f"{path}: {rate:.3f}")
    _write_csv(Path(cfg.out_dir) / "eval.csv", ("checkpoint", "episodes", "success_rate"), rows)
    return 0


def _sweep_variant(cfg: ExperimentConfig, axis: str, value, method: str, base_noise):
    cfg = replace(cfg, method=method)
    if axis == "n_success":
        return replace(cfg, n_success_examples=int(value))
    if axis == "n_trajectories":
        n = int(round(cfg.dataset.n_trajectories * float(value)))
        return replace(cfg, dataset=replace(cfg.dataset, n_trajectories=n, noise_std=base_noise))
    return replace(cfg, dataset=replace(cfg.dataset, quality=str(value)))


def _sweep_job(job):
    cfg, seed, store_root = job
    try:
        ds = ex.make_dataset(cfg)
        ss = ex.make_success_set(cfg, ds)
        res = ex.run_single(replace(cfg, seeds=[seed]), ds, ss, seed, ex.RunStore(store_root))
        return res.success_rate, "ok"
    except (TrainingDivergedError, ex.CalibrationError, ValueError, FloatingPointError) as exc:
        return None, f"failed: {type(exc).__name__}: {exc}"


def run_sweep(cfg: ExperimentConfig, axis: str, values, methods) -> list[dict]:
    """One run per (value, method, seed); returns per-run records in deterministic order."""
    if not values:
        raise ConfigError("sweep needs a nonempty list of values")
    base_noise = None
    if axis == "n_trajectories" and cfg.dataset.noise_std is None and not cfg.dataset.path:
        # hold data quality fixed: calibrate once at the base size
        base_noise, _ = ex.calibrate(cfg.env_id, cfg.dataset.quality, cfg.dataset.n_trajectories, cfg.dataset.seed,
                                     cfg.dataset.calibration_iters)
    store_root = Path(cfg.out_dir) / "cache"
    jobs, keys = [], []
    for value in values:
        for method in methods:
            variant = _sweep_variant(cfg, axis, value, method, base_noise)
            for seed in cfg.seeds:
                jobs.append((variant, seed, store_root))
                keys.append((value, method, seed))
    if _workers() > 1:
        with ProcessPoolExecutor(max_workers=_workers()) as pool:
            outcomes = list(pool.map(_sweep_job, jobs))
    else:
        outcomes = [_sweep_job(j) for j in jobs]
    return [{"value": v, "method": m, "seed": s, "success_rate": o[0], "status": o[1]} for (v, m, s), o in zip(keys, outcomes)]


def aggregate_sweep(axis: str, runs: list[dict]) -> list[dict]:
    out = []
    groups = dict.fromkeys((str(r["value"]), r["method"]) for r in runs)
    for value, method in groups:
        rs = [r for r in runs if str(r["value"]) == value and r["method"] == method]
        ok = [r["success_rate"] for r in rs if r["status"] == "ok"]
        mean, se = ex.summarize(ok) if ok else ("", "")
        failed = len(rs) - len(ok)
        status = "ok" if not failed else f"{failed} of {len(rs)} runs failed"
        out.append({"axis": axis, "value": value, "method": method, "n_seeds": len(ok), "mean_success": mean,
                    "stderr": se, "status": status})
    return out


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    from .plotting import sweep_plot

    axis = args.axis or cfg.sweep.axis
    values = [v for v in args.values.split(",") if v.strip()] if args.values is not None else list(cfg.sweep.values)
    if not values:
        raise ConfigError("sweep needs values (--values or [sweep].values)")
    methods = args.methods.split(",") if args.methods else [cfg.method]
    for m in methods:
        replace(cfg, method=m).validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = run_sweep(cfg, axis, values, methods)
    for r in runs:
        if r["status"] != "ok":
            print(f"run value={r['value']} method={r['method']} seed={r['seed']}: {r['status']}", file=sys.stderr)
    _write_csv(out / "sweep_runs.csv", ("value", "method", "seed", "success_rate", "status"), runs)
    agg = aggregate_sweep(axis, runs)
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, agg)
    sweep_plot(agg, axis, out / "sweep.svg")
    for row in agg:
        mean = "n/a" if row["mean_success"] == "" else f"{row['mean_success']:.3f} +/- {row['stderr']:.3f}"
        print(f"{axis}={row['value']:>8} {row['method']:>5}: {mean} [{row['status']}]")
    return 0


def cmd_plan_cem(cfg: ExperimentConfig, args) -> int:
    from .planner import default_task_suite, multitask_eval
    from .plotting import task_bar_plot

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, _ = _load_data(cfg)
    store = ex.RunStore(out / "cache")
    env = make_env(cfg.env_id)
    critic, _, _ = store.critic(ds, cfg, cfg.seeds[0], ex.action_scale(env))
    tasks = default_task_suite()
    rows = multitask_eval(critic, tasks, cfg.planner, cfg.eval_episodes, cfg.seeds)
    _write_csv(out / "plan_cem_runs.csv", ("task", "planner", "seed", "success_rate"), rows)
    agg = []
    for task in dict.fromkeys(r["task"] for r in rows):
        for planner in ("cem", "random"):
            vals = [r["success_rate"] for r in rows if r["task"] == task and r["planner"] == planner]
            mean, se = ex.summarize(vals)
            agg.append({"task": task, "planner": planner, "n_seeds": len(vals), "mean_success": mean, "stderr": se})
            print(f"{task:>13} {planner:>6}: {mean:.3f} +/- {se:.3f}")
    _write_csv(out / "plan_cem.csv", ("task", "planner", "n_seeds", "mean_success", "stderr"), agg)
    task_bar_plot(agg, out / "plan_cem.svg")
    return 0


def cmd_oracle_check(cfg, args) -> int:
    checks = identity_checks(seed=args.seed or 0, perturb_gamma=args.perturb_gamma)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: residual {c.residual:.3e} (tol {c.tolerance:.0e})")
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plan-cem": cmd_plan_cem,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laeo-lab", description="Offline example-based control experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="run a single training seed")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. critic.steps=500 (repeatable)")

    for name in ("collect", "train", "plan-cem"):
        common(sub.add_parser(name))
    p = sub.add_parser("eval")
    common(p)
    p.add_argument("--checkpoint", help="single policy checkpoint (default: every seed_*/policy.ckpt under out_dir)")
    p.add_argument("--deterministic", action="store_true", help="act with the mean action")
    p = sub.add_parser("sweep")
    common(p)
    p.add_argument("--axis", choices=("n_success", "n_trajectories", "quality"))
    p.add_argument("--values", help="comma-separated values (n_trajectories values are multipliers)")
    p.add_argument("--methods", help="comma-separated methods (default: config method)")
    p = sub.add_parser("oracle-check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb-gamma", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.command != "oracle-check":
            cfg = load_config(args.config, args.override, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, DatasetFormatError, ex.CalibrationError, TrainingDivergedError) as exc:
        print(f"laeo-lab {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
