"""Command-line driver.

    branchsig solve --csv forcing.csv --coeffs 10,5,1 --init 0,0
    branchsig stream --csv forcing.csv --coeffs 10,5,1 --init 0,0 --n0 200 --kappa 10
    branchsig experiment fbm-linear --config run.cfg --set seed=3
    branchsig bench-speedup --sizes 200,400,800
    branchsig grad-check --instances 20

Every command prints ``key = value`` lines; failures exit with status 2 and a
message naming the stage.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import BENCHMARKS, load_config, make_config
from .experiments import Report, StageError, load_csv, run_experiment
from .kernel import KernelSpec, build_gram_stack
from .linear_solver import (
    LinearODESpec,
    forcing_reconstruction,
    integrated_forcing,
    node_solution,
    relative_mse,
    solve_fit,
)
from .path_core import InvalidInputError, augment_time
from .report import report_body, write_report
from .stochastic import interp_forcing, linear_ode_rhs, reference_integrate
from .streaming import StreamConfig, run_stream


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _kernel_args(p):
    p.add_argument("--method", choices=("I", "II"), default="I")
    p.add_argument("--kernel", choices=("rbf", "linear"), default="rbf")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--normalization", choices=("robust", "none"), default="robust")
    p.add_argument("--ridge", type=float, default=0.0)


def _ode_args(p):
    p.add_argument("--csv", required=True, help="forcing samples: two columns t, f(t)")
    p.add_argument("--coeffs", required=True, help="constant A_0,...,A_m (scalar ODE)")
    p.add_argument("--init", required=True, help="u(t0), u'(t0), ..., u^(m-1)(t0)")
    p.add_argument("--out", default="out")
    p.add_argument("--plot", action="store_true")
    _kernel_args(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="branchsig", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="batch fit of a scalar linear ODE driven by a CSV forcing")
    _ode_args(p)

    p = sub.add_parser("stream", help="test/train/retrain protocol on a CSV forcing")
    _ode_args(p)
    p.add_argument("--n0", type=int, required=True)
    p.add_argument("--kappa", type=float, default=10.0, help="retrain cadence; inf never retrains")

    p = sub.add_parser("experiment", help="run a named benchmark")
    p.add_argument("name", choices=BENCHMARKS)
    p.add_argument("--config", help="key = value file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("bench-speedup", help="naive vs streamed prefix signature timing")
    p.add_argument("--sizes", default="200,400,800")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", help="directory for a log-log figure")

    p = sub.add_parser("grad-check", help="analytic/tape gradients vs central differences")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--grad", choices=("tape", "fd"), default="tape")
    return ap


def _ode_problem(args):
    path = load_csv(args.csv)
    coeffs = _floats(args.coeffs)
    init = _floats(args.init)
    if len(init) != len(coeffs) - 1:
        raise InvalidInputError(f"order {len(coeffs) - 1} needs {len(coeffs) - 1} initial values, got {len(init)}")
    spec = LinearODESpec(coeffs, [[g] for g in init])
    t, f = path.grid, path.values[:, 0]
    mats = [np.atleast_2d(c) for c in coeffs]
    ref = reference_integrate(linear_ode_rhs(lambda s: mats, interp_forcing(t, f), spec.order), init, t)[:, 0]
    kspec = KernelSpec(args.kernel, args.sigma, args.depth, args.normalization)
    return path, spec, kspec, ref


def _cli_report(name, args, metrics, trace, info) -> Report:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "out", "plot")}
    from hashlib import sha256

    digest = sha256(repr(sorted(cfg.items())).encode()).hexdigest()[:12]
    return Report(name, digest, cfg, metrics, info, 0.0, trace)


def cmd_solve(args) -> Report:
    path, spec, kspec, ref = _ode_problem(args)
    t, f = path.grid, path.values[:, 0]
    stack = build_gram_stack(augment_time(path), kspec, spec.order)
    fit = solve_fit(spec, stack, f, args.method, ridge=args.ridge)
    u = node_solution(fit)[:, 0]
    f_hat = forcing_reconstruction(fit)[:, 0]
    target = f if args.method == "I" else integrated_forcing(t, f, spec.order)[:, 0]
    fname = "forcing" if args.method == "I" else "integrated_forcing"
    metrics = {f"all.{fname}": relative_mse(f_hat, target), "all.solution": relative_mse(u, ref)}
    trace = {"t": t, "f_true": target, "f_hat": f_hat, "u_ref": ref, "u_hat": u}
    return _cli_report("solve", args, metrics, trace, {"rank": fit.rank})


def cmd_stream(args) -> Report:
    path, spec, kspec, ref = _ode_problem(args)
    t, f = path.grid, path.values[:, 0]
    sc = StreamConfig(args.n0, args.kappa, args.method, args.ridge)
    res = run_stream(t, augment_time(path).values, f, spec, kspec, sc)
    u, f_hat, target = res.u[:, 0], res.f_hat[:, 0], res.f_target[:, 0]
    fname = "forcing" if args.method == "I" else "integrated_forcing"
    metrics = {}
    for split, sl in (("train", res.train), ("test", res.test)):
        if len(u[sl]):
            metrics[f"{split}.{fname}"] = relative_mse(f_hat[sl], target[sl])
            metrics[f"{split}.solution"] = relative_mse(u[sl], ref[sl])
    info = {"n0": args.n0, "max_row_residual": float(np.max(np.abs(res.row_residuals))),
            "retrains": res.kinds.count("retrain")}
    trace = {"t": t, "f_true": target, "f_hat": f_hat, "u_ref": ref, "u_hat": u}
    return _cli_report("stream", args, metrics, trace, info)


def cmd_experiment(args) -> Report:
    overrides = dict(kv.split("=", 1) for kv in args.set)
    if args.out:
        overrides["output_dir"] = args.out
    if args.no_plot:
        overrides["plot"] = "false"
    cfg = load_config(args.config, overrides) if args.config else make_config(args.name, None, overrides)
    if cfg.benchmark != args.name:
        raise InvalidInputError(f"config file is for {cfg.benchmark!r}, not {args.name!r}")
    report = run_experiment(cfg)
    args.out, args.plot = cfg.output_dir, cfg.plot
    return report


def cmd_bench(args) -> int:
    from .bench import bench_speedup, fitted_exponent

    rows = bench_speedup(tuple(int(s) for s in _floats(args.sizes)), args.dim, args.depth,
                         repeats=args.repeats)
    print(f"{'N':>6} {'naive_s':>12} {'streamed_s':>12} {'ratio':>10}")
    for r in rows:
        print(f"{r['N']:>6d} {r['naive_s']:>12.6f} {r['streamed_s']:>12.6f} {r['ratio']:>10.1f}")
    if len(rows) > 1:
        print(f"streamed_exponent = {fitted_exponent(rows):.3f}")
        print(f"naive_exponent = {fitted_exponent(rows, 'naive_s'):.3f}")
    if args.out:
        from .plotting import plot_speedup

        os.makedirs(args.out, exist_ok=True)
        fig = os.path.join(args.out, "speedup.png")
        plot_speedup(rows, fig)
        print(f"figure = {fig}")
    return 0


def cmd_grad_check(args) -> int:
    from .bench import lift_grad_error, solver_grad_error

    solver = max(solver_grad_error(s) for s in range(args.instances))
    lift = max(lift_grad_error(s, args.grad) for s in range(args.instances))
    ok = solver < 1e-5 and lift < 1e-4
    print(f"solver_max_rel_err = {solver:.3e}")
    print(f"lift_max_rel_err = {lift:.3e}")
    print(f"status = {'pass' if ok else 'fail'}")
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "bench-speedup":
            return cmd_bench(args)
        if args.command == "grad-check":
            return cmd_grad_check(args)
        stage = {"solve": cmd_solve, "stream": cmd_stream, "experiment": cmd_experiment}[args.command]
        report = stage(args)
        paths = write_report(report, args.out, plot=args.plot)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, OSError) as exc:
        print(f"error: [input] {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(report_body(report))
    for k, v in paths.items():
        print(f"file.{k} = {v}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
