"""Command-line interface: data generation, training, sweeps, extraction.

Exit codes: 0 success/converged, 1 usage or malformed input, 2 numerical
divergence (Newton failure, overflow, refinement failure). Every subcommand is
deterministic given its flags and seed: files contain no timestamps, and JSON
is written with sorted keys, so reruns are byte-identical. Timing goes to
stdout only.
"""

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor

from . import bench, odeint, pinet, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1 instead of 2."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _add_train_flags(p):
    p.add_argument("--method", default="if-euler", help="integration method "
                   f"({', '.join(sorted(odeint.METHODS))})")
    p.add_argument("--degree", type=int, default=None,
                   help="polynomial degree (default: the problem's registered degree)")
    p.add_argument("--width", type=int, default=None,
                   help="hidden width (default: number of monomials of the degree)")
    p.add_argument("--lr", type=float, default=1e-2, help="initial learning rate")
    p.add_argument("--lr-floor", type=float, default=1e-4,
                   help="cosine-decay final learning rate")
    p.add_argument("--epochs", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0, help="64-bit seed for all randomness")
    p.add_argument("--newton-tol", type=float, default=odeint.NEWTON_TOL)
    p.add_argument("--freeze-linearization", action="store_true",
                   help="treat the IF-Euler propagator matrix as constant in the backward pass")
    p.add_argument("--no-segment-weights", action="store_true",
                   help="disable the 1+||y||^2 per-segment loss weights")
    p.add_argument("--retries", type=int, default=0,
                   help="divergence backoff retries (restore best, halve lr; max 5)")
    p.add_argument("--loss-floor", type=float, default=None,
                   help="stop early once the best loss reaches this value")


def _config_from_args(args, problem=None):
    degree = args.degree
    if degree is None:
        degree = problem.degree if problem is not None else 1
    return train.TrainConfig(
        method=args.method, degree=degree, width=args.width,
        epochs=args.epochs, lr=args.lr, lr_floor=args.lr_floor, seed=args.seed,
        weighted=not args.no_segment_weights,
        freeze_linearization=args.freeze_linearization,
        newton_tol=args.newton_tol, retries=args.retries,
        loss_floor=args.loss_floor,
    ).validate()


def build_parser():
    top = _Parser(prog="polyode",
                  description="Train stiff neural ODEs with exponential and implicit "
                              "single-step methods, and recover their equations.")
    sub = top.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[], help="write a reference dataset",
                       description="Generate a uniform reference dataset for a "
                                   "registered benchmark problem.")
    g.add_argument("--problem", required=True, help=f"one of {', '.join(sorted(bench.PROBLEMS))}")
    g.add_argument("--n", type=int, required=True, help="number of grid points")
    g.add_argument("--out", default=".", help="output directory")

    t = sub.add_parser("train", help="fit a polynomial network to a dataset",
                       description="Train on an existing dataset file or on a "
                                   "freshly generated reference (give --problem and --n).")
    t.add_argument("--dataset", default=None, help="path to a dataset CSV")
    t.add_argument("--problem", default=None, help="benchmark problem to generate from")
    t.add_argument("--n", type=int, default=None, help="grid size when generating")
    t.add_argument("--out", default=".", help="output directory")
    _add_train_flags(t)

    s = sub.add_parser("sweep", help="error-vs-n sweep over methods",
                       description="Train every (method, n) cell in a worker pool "
                                   "and tabulate coefficient errors per method.")
    s.add_argument("--problem", required=True)
    s.add_argument("--methods", default="if-euler",
                   help="comma-separated method names")
    s.add_argument("--n-list", default=None,
                   help="comma-separated grid sizes (default: the problem's sweep)")
    s.add_argument("--workers", type=int, default=None, help="worker processes")
    s.add_argument("--out", default=".", help="output directory")
    _add_train_flags(s)

    e = sub.add_parser("extract", help="read the exact polynomial out of a checkpoint",
                       description="Load a network checkpoint and write its "
                                   "represented polynomial as JSON.")
    e.add_argument("--checkpoint", required=True, help="checkpoint JSON path")
    e.add_argument("--out", default=".", help="output directory")

    d = sub.add_parser("stiffness-demo", help="explicit-vs-implicit cost comparison",
                       description="Integrate one Van der Pol relaxation period with "
                                   "adaptive RKF45 and with the Radau5 reference "
                                   "generator; record evaluation counts.")
    d.add_argument("--rtol", type=float, default=1e-3)
    d.add_argument("--atol", type=float, default=1e-6)
    d.add_argument("--n-points", type=int, default=2500,
                   help="output grid points for the Radau5 side")
    d.add_argument("--out", default=".", help="output directory")
    return top


# ---------------------------------------------------------------------------
# subcommands


def _dataset_path(out, problem, n):
    return f"{out}/{problem}_n{n}.csv"


def cmd_generate(args):
    problem = bench.get_problem(args.problem)
    if args.n < 2:
        raise ValueError("--n must be at least 2")
    ds = bench.generate_reference(problem, args.n)
    path = _dataset_path(args.out, problem.name, args.n)
    ds.save(path)
    print(f"wrote {path}: {ds.n} rows over t in "
          f"[{ds.times[0]:g}, {ds.times[-1]:g}], dim {ds.dim}")
    return 0


def _load_or_generate(args):
    """Dataset plus (problem or None) from --dataset / --problem flags."""
    if (args.dataset is None) == (args.problem is None):
        raise ValueError("give exactly one of --dataset or --problem")
    if args.dataset is not None:
        ds = train.TrajectoryDataset.load(args.dataset)
        problem = bench.PROBLEMS.get(ds.name)
        return ds, problem
    if args.n is None:
        raise ValueError("--problem needs --n")
    problem = bench.get_problem(args.problem)
    return bench.generate_reference(problem, args.n), problem


def _train_stem(out, name, method, n, seed):
    return f"{out}/{name}_{method}_n{n}_seed{seed}"


def _run_training(ds, problem, config, out):
    """Fit, write report/model/loss/checkpoint files, return (report, stem)."""
    name = problem.name if problem is not None else (ds.name or "dataset")
    net = pinet.PiNet(m=ds.dim, degree=config.degree, width=config.width)
    truth = problem.truth if problem is not None else None
    report = train.fit(ds, config, net=net, truth=truth)
    stem = _train_stem(out, name, config.method, ds.n, config.seed)
    report.save(stem + "_report.json")
    report.recovered.save(stem + "_model.json")
    report.save_loss_history(stem + "_loss.csv")
    pinet.save_checkpoint(stem + "_checkpoint.json", net, report.params, config.seed)
    if report.error_table is not None:
        report.error_table.save_csv(stem + "_errors.csv")
    return report, stem


def cmd_train(args):
    ds, problem = _load_or_generate(args)
    if args.method not in odeint.METHODS:
        raise ValueError(f"unknown method {args.method!r}")
    config = _config_from_args(args, problem)
    report, stem = _run_training(ds, problem, config, args.out)
    print(f"wrote {stem}_report.json  best_loss={report.best_loss:.6g} "
          f"epoch {report.best_epoch}  wall {report.wall_time_s:.1f}s")
    if not report.converged:
        print(f"training diverged at epoch {report.diverged['epoch']}: "
              f"{report.diverged['reason']}", file=sys.stderr)
        return 2
    return 0


def _sweep_cell(payload):
    """One (method, n) cell of a sweep; runs in a worker process."""
    (dataset_path, problem_name, method, out, config_dict) = payload
    ds = train.TrajectoryDataset.load(dataset_path)
    problem = bench.get_problem(problem_name)
    config = train.TrainConfig(**config_dict).validate()
    report, stem = _run_training(ds, problem, config, out)
    cell = {
        "method": method,
        "n": ds.n,
        "status": "converged" if report.converged else "diverged",
        "best_loss": report.best_loss,
        "report": stem + "_report.json",
        "model": stem + "_model.json",
    }
    if report.diverged is not None:
        cell["diverged"] = report.diverged
    if report.error_table is not None:
        cell["max_relative_error"] = report.error_table.max_relative_error
        cell["max_spurious"] = report.error_table.max_spurious
        cell["errors"] = [
            {"output": e.output,
             "monomial": ";".join(str(x) for x in e.exponents),
             "truth": e.truth, "estimate": e.estimate,
             "relative_error": e.relative_error, "spurious_abs": e.spurious}
            for e in report.error_table.entries]
    return cell


def cmd_sweep(args):
    problem = bench.get_problem(args.problem)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in odeint.METHODS:
            raise ValueError(f"unknown method {m!r}")
    if args.n_list is not None:
        n_list = [int(v) for v in args.n_list.split(",") if v.strip()]
    else:
        n_list = list(problem.n_values)
    if not methods or not n_list or min(n_list) < 2:
        raise ValueError("need at least one method and n values >= 2")
    config = _config_from_args(args, problem)

    for n in n_list:  # datasets are shared across methods; generate once each
        path = _dataset_path(args.out, problem.name, n)
        bench.generate_reference(problem, n).save(path)

    payloads = [(_dataset_path(args.out, problem.name, n), problem.name,
                 method, args.out, {**config.to_json_dict(), "method": method})
                for method in methods for n in n_list]
    if args.workers is not None and args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            cells = list(pool.map(_sweep_cell, payloads))
    else:
        cells = [_sweep_cell(p) for p in payloads]

    for method in methods:  # one error-vs-n CSV per method
        rows = [c for c in cells if c["method"] == method]
        path = f"{args.out}/{problem.name}_{method}_sweep.csv"
        with open(path, "w") as fh:
            fh.write("n,output,monomial,truth,estimate,relative_error,spurious_abs,status\n")
            for cell in sorted(rows, key=lambda c: c["n"]):
                if cell["status"] != "converged":
                    fh.write(f"{cell['n']},,,,,,,diverged\n")
                    continue
                for e in cell.get("errors", []):
                    rel = "" if e["relative_error"] is None else f"{e['relative_error']:.17g}"
                    spu = "" if e["spurious_abs"] is None else f"{e['spurious_abs']:.17g}"
                    fh.write(f"{cell['n']},{e['output']},{e['monomial']},"
                             f"{e['truth']:.17g},{e['estimate']:.17g},{rel},{spu},converged\n")

    index = {
        "problem": problem.name,
        "methods": methods,
        "n_list": n_list,
        "config": config.to_json_dict(),
        "cells": [{k: v for k, v in c.items() if k != "errors"} for c in cells],
    }
    index_path = f"{args.out}/{problem.name}_sweep_index.json"
    with open(index_path, "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    diverged = sum(1 for c in cells if c["status"] != "converged")
    print(f"wrote {index_path}: {len(cells)} cells, {diverged} diverged")
    return 0


def cmd_extract(args):
    net, params, _seed = pinet.load_checkpoint(args.checkpoint)
    model = net.extract_polynomial(params)
    stem = args.checkpoint.rsplit("/", 1)[-1]
    stem = stem[:-len(".json")] if stem.endswith(".json") else stem
    if stem.endswith("_checkpoint"):
        stem = stem[:-len("_checkpoint")]
    path = f"{args.out}/{stem}_model.json"
    model.save(path)
    print(f"wrote {path}: {len(model.coeffs)} outputs, degree {model.degree}")
    return 0


def cmd_stiffness_demo(args):
    record = bench.stiffness_demo(rtol=args.rtol, atol=args.atol,
                                  n_points=args.n_points)
    path = f"{args.out}/{record.problem}_stiffness.json"
    with open(path, "w") as fh:
        json.dump(record.to_json_dict(), fh, indent=1, sort_keys=True)
    print(f"wrote {path}: rkf45 {record.rkf45_evals:,} evals vs radau5 "
          f"{record.radau_evals:,} evals (ratio {record.ratio:.1f})")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "extract": cmd_extract,
    "stiffness-demo": cmd_stiffness_demo,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (odeint.NewtonDiverged, odeint.MinStepReached, odeint.SingularJacobian,
            bench.RefinementFailed) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
