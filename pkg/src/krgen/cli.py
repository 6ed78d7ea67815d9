"""Command line entry point: ``krgen {train,experiment,estimate,selftest,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import KrgenError
from .experiment import (
    WORKERS_ENV,
    ExperimentConfig,
    TaskData,
    aggregate,
    children,
    emit_report,
    load_report,
    orchestrate,
    results_from_trajectories,
    run_seeds,
    _seed_int,
)
from .kernelinfo import (
    auto_kernel,
    cond_mi_from_grams,
    entropy_estimate,
    gaussian_kernel,
    gram,
    mi_from_grams,
)
from .nnet import MlpModel
from .trainer import attach_auxiliary, load_trajectory, run_training, save_trajectory

log = logging.getLogger("krgen")

_FLOAT_FIELDS = {"eta", "sigma2", "virtual_sigma2", "rho", "kernel_quantile", "noise_var", "class_spread"}
_INT_FIELDS = {"epochs", "batch_size", "n", "hidden", "seed", "runs", "mi_epoch_stride", "hessian_probes",
               "hessian_points", "input_dim", "num_classes"}
_BOOL_FIELDS = {"apply_normalizer", "include_between"}


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _BOOL_FIELDS:
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name in _FLOAT_FIELDS:
            p.add_argument(flag, dest=f.name, type=float)
        elif f.name in _INT_FIELDS:
            p.add_argument(flag, dest=f.name, type=int)
        elif f.name == "algorithm":
            p.add_argument(flag, dest=f.name, choices=("sgd", "sgld"))
        elif f.name == "task":
            p.add_argument(flag, dest=f.name, choices=("synthetic", "mnist", "classification"))
        elif f.name == "partition_mode":
            p.add_argument(flag, dest=f.name, choices=("full", "per_layer", "per_param"))
        else:
            p.add_argument(flag, dest=f.name)


def config_from_args(args) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(ExperimentConfig)}
    if args.config is not None:
        return ExperimentConfig.from_json(args.config.read_text(), **overrides)
    task = overrides.pop("task") or "synthetic"
    return ExperimentConfig.for_task(task, **overrides)


def _load_samples(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        a = np.load(path)
    else:
        a = np.loadtxt(path, delimiter=",", ndmin=2)
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[0], -1)


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    task = TaskData(cfg)
    ss = run_seeds(cfg.seed, max(cfg.runs, args.run + 1))[args.run]
    train_ss, data_ss, _ = children(ss, 3)
    train, test = task.draw(data_ss)
    traj = run_training(MlpModel(cfg.layer_sizes()), train, cfg.train_config(_seed_int(train_ss)), test)
    if cfg.algorithm == "sgd":
        attach_auxiliary(traj, cfg.virtual_sigma2)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_trajectory(traj, args.out)
    print(json.dumps({
        "trajectory": str(args.out),
        "steps": traj.n_steps,
        "params": int(traj.w0.size),
        "final_train_loss": float(traj.train_loss[-1]) if traj.train_loss.size else None,
        "final_test_loss": float(traj.test_loss[-1]) if traj.test_loss.size else None,
    }, indent=2))
    return 0


def cmd_experiment(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out or cfg.output_dir)
    mi, trajs, report = orchestrate(cfg, keep_trajectories=args.save_trajectories, workers=args.workers)
    written = emit_report(report, mi, out)
    (out / "config.json").write_text(cfg.to_json())
    if args.save_trajectories:
        runs = out / "runs"
        runs.mkdir(exist_ok=True)
        for r, traj in zip(mi.run_ids, trajs):
            save_trajectory(traj, runs / f"run_{r:04d}.traj")
    for p in written:
        print(p)
    return 0


def cmd_report(args) -> int:
    src = Path(args.source)
    out = Path(args.out) if args.out else src
    runs = sorted((src / "runs").glob("run_*.traj")) if (src / "runs").is_dir() else []
    if runs and not args.from_json:
        cfg = ExperimentConfig.from_json((src / "config.json").read_text())
        trajs = {int(p.stem.split("_")[1]): load_trajectory(p) for p in runs}
        mi, _, report = aggregate(cfg, results_from_trajectories(cfg, trajs))
    else:
        mi, report = None, load_report(src)
    for p in emit_report(report, mi, out):
        print(p)
    return 0


def cmd_estimate(args) -> int:
    x = _load_samples(args.x)
    norm = args.normalize
    q = args.quantile

    def prep(a):
        if args.width is not None:
            return a, gaussian_kernel(args.width, a.shape[1])
        return auto_kernel(a, q)

    if args.y is None:
        xs, k = prep(x)
        est = entropy_estimate(xs, k, apply_normalizer=norm)
        result = {"entropy": est.value, "m": est.m, "width": k.width,
                  "concentration_radius_at_95": est.concentration_radius_at_95}
    else:
        y = _load_samples(args.y)
        gx, gy = gram(*prep(x)), gram(*prep(y))
        if args.z is None:
            result = {"mutual_information": mi_from_grams(gx, gy, norm), "m": gx.m}
        else:
            gz = gram(*prep(_load_samples(args.z)))
            result = {"conditional_mutual_information": cond_mi_from_grams(gx, gy, gz, norm), "m": gx.m}
    result["normalized"] = norm
    print(json.dumps(result, indent=2))
    return 0


def cmd_selftest(args) -> int:
    if args.pytest:
        import pytest

        return int(pytest.main(["-q", *args.pytest_args]))
    from .selftest import run_all

    return 0 if run_all(args.check or None) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="krgen", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a single run and save its trajectory")
    _add_config_flags(p)
    p.add_argument("--run", type=int, default=0, help="run index within the experiment seed")
    p.add_argument("--out", type=Path, default=Path("trajectory.traj"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="multi-run experiment with bound report")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--workers", type=int, help=f"parallel workers (default: ${WORKERS_ENV} or all CPUs)")
    p.add_argument("--save-trajectories", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("estimate", help="entropy / MI / conditional MI from sample files")
    p.add_argument("x", help="samples, one per row (.npy or .csv)")
    p.add_argument("--y")
    p.add_argument("--z")
    p.add_argument("--width", type=float, help="fixed Gaussian width (default: pairwise-distance rule)")
    p.add_argument("--quantile", type=float, default=0.15)
    p.add_argument("--normalize", action="store_true", help="multiply entropies by the kernel normalizer")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("selftest", help="run the oracle and property checks")
    p.add_argument("--check", action="append", help="run only the named check (repeatable)")
    p.add_argument("--pytest", action="store_true", help="run the pytest suite instead")
    p.add_argument("pytest_args", nargs="*")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("report", help="re-render a report from an experiment directory")
    p.add_argument("source", help="experiment output directory")
    p.add_argument("--out", help="where to write (default: source)")
    p.add_argument("--from-json", action="store_true", help="ignore saved trajectories, use bounds.json")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (KrgenError, ValueError, OSError) as exc:
        print(f"krgen: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
