"""Command-line driver: ``relugap <command> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 a solver did not
certify its result, 4 a verification check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .arrangements import PatternSet, draw_patterns, enumerate_patterns, paired_patterns, sample_patterns
from .core import (
    LABEL_MODES,
    RelugapError,
    SolverConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
    save_report,
    to_jsonable,
)
from .decomposition import cone_sharpness
from .experiments import (
    CONFIG_TYPES,
    drift_rows,
    load_config,
    run_bounds,
    run_drift,
    run_pipeline,
    save_config,
    width_sweep,
)
from .network import init_network, save_network, train_gd
from .solvers import save_solution, solve_cone_constrained, solve_gated

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNCERTIFIED = 3
EXIT_VERIFY_FAILED = 4

DEFAULT_DELTA = 0.1

BOUND_FIELDS = (
    "kappa",
    "upper_gated",
    "lower_full",
    "tighter_upper_factor",
    "maxcut_value",
    "sample_thresholds",
)


class ConfigError(RelugapError):
    pass


# -- output helpers ----------------------------------------------------------------


def _emit_text(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _emit_json(obj, out: Optional[str]) -> None:
    _emit_text(json.dumps(to_jsonable(obj), indent=2) + "\n", out)


def _emit_csv(rows: Sequence[dict], out: Optional[str]) -> None:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    _emit_text(buf.getvalue(), out)


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _parse_ints(text: str) -> tuple:
    """``"0,3,5"`` or a half-open range ``"0:100"``."""
    try:
        if ":" in text:
            a, b = text.split(":")
            return tuple(range(int(a), int(b)))
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"expected integers or a range a:b, got {text!r}") from exc


def _resolve_config(args, command: str, overrides: dict):
    """Config file values, then every explicitly given command-line option."""
    cls = CONFIG_TYPES[command]
    if args.config:
        base = load_config(args.config, command).to_dict()
    else:
        base = cls().to_dict()
    base.update({k: v for k, v in overrides.items() if v is not None})
    cfg = cls.from_dict(base)
    if getattr(args, "save_config", None):
        save_config(cfg, args.save_config, command)
    return cfg


# -- commands ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    ds = generate_dataset(
        args.n, args.d, args.beta, args.label_mode, args.seed or 0, hidden=args.hidden, label_path=args.labels
    )
    if not args.out:
        raise ConfigError("gen needs --out")
    save_dataset(ds, args.out)
    return EXIT_OK


def cmd_sample(args) -> int:
    ds = load_dataset(args.data)
    seed = args.seed or 0
    if args.mode == "enumerate":
        ps = enumerate_patterns(ds)
    elif args.mode == "paired":
        ps = paired_patterns(ds, seed)
    elif args.mode == "raw":
        ps = PatternSet.from_masks(draw_patterns(ds, args.count, seed), "sampled", seed=seed, raw_draws=args.count)
    else:
        ps = sample_patterns(ds, args.count, seed)
    _emit_text(ps.to_text(), args.out)
    return EXIT_OK


def _solver_cfg(args, default_tol: float) -> SolverConfig:
    return SolverConfig(
        tol_kkt=default_tol if args.tol is None else args.tol,
        max_iters=args.max_iters,
        step_rule=args.step_rule,
        seed=args.seed or 0,
    )


def _load_problem(args):
    ds = load_dataset(args.data)
    if args.beta is not None:
        ds = ds.replace(beta=args.beta)
    return ds, PatternSet.load(args.patterns)


def cmd_solve_gated(args) -> int:
    ds, ps = _load_problem(args)
    sol = solve_gated(ds, ps, _solver_cfg(args, 1e-8))
    _write_solution(sol, args.out)
    return EXIT_OK if sol.certified else EXIT_UNCERTIFIED


def cmd_solve_cone(args) -> int:
    ds, ps = _load_problem(args)
    sol = solve_cone_constrained(ds, ps, _solver_cfg(args, 1e-6))
    _write_solution(sol, args.out)
    return EXIT_OK if sol.certified else EXIT_UNCERTIFIED


def _write_solution(sol, out):
    if out:
        save_solution(sol, out)
    else:
        payload = to_jsonable(sol)
        payload["masks"] = sol.masks.astype(int).tolist()
        _emit_json({"type": type(sol).__name__, **payload}, None)


def cmd_decompose(args) -> int:
    ds = load_dataset(args.data)
    ps = PatternSet.load(args.patterns)
    if not 0 <= args.index < len(ps):
        raise ConfigError(f"pattern index {args.index} out of range for {len(ps)} patterns")
    w = np.array(_parse_floats(args.w))
    if w.shape != (ds.d,):
        raise ConfigError(f"--w needs {ds.d} entries")
    z = w / np.linalg.norm(w)
    rep = cone_sharpness(ds, ps[args.index], z, SolverConfig(tol_kkt=args.tol, max_iters=args.max_iters))
    dec = rep.decomposition
    _emit_json(
        {
            "sharpness": rep.value,
            "chebyshev_upper_bound": rep.upper_bound,
            "eps_star": rep.eps_star,
            "norm_sum": dec.norm_sum,
            "lower_bound": dec.lower_bound,
            "certified": dec.certified,
            "iterations": dec.iterations,
            "u": dec.u,
            "v": dec.v,
        },
        args.out,
    )
    return EXIT_OK if dec.certified else EXIT_UNCERTIFIED


def cmd_bounds(args) -> int:
    cfg = _resolve_config(
        args, "bounds",
        dict(n=args.n, d=args.d, beta=args.beta, label_mode=args.label_mode, seed=args.seed,
             delta=args.delta, sampled=args.sampled, data=args.data),
    )
    report = run_bounds(cfg)
    if args.show:
        _emit_json({k: getattr(report, k) for k in args.show}, args.out)
    elif args.out:
        save_report(report, args.out)
    else:
        _emit_json({"type": "BoundReport", **to_jsonable(report)}, None)
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    if args.beta is not None:
        ds = ds.replace(beta=args.beta)
    p0 = init_network(args.m, ds.d, args.seed or 0)
    lr = "backtracking" if args.lr == "backtracking" else float(args.lr)
    trace, params = train_gd(ds, p0, lr, args.steps, args.snapshot_every)
    if args.out:
        trace.to_csv(args.out)
    else:
        buf = io.StringIO()
        buf.write("step,loss,drift\n")
        for k, (loss, dr) in enumerate(zip(trace.losses, trace.drift)):
            buf.write(f"{k},{loss!r},{dr!r}\n")
        sys.stdout.write(buf.getvalue())
    if args.save_network:
        save_network(params, args.save_network)
    print(f"status={trace.status} drift={trace.drift_fraction:.4f} grad_norm={trace.grad_norm:.3e}", file=sys.stderr)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _resolve_config(
        args, "pipeline",
        dict(n=args.n, d=args.d, beta=args.beta, label_mode=args.label_mode, seed=args.seed,
             delta=args.delta, m=args.m),
    )
    report = run_pipeline(cfg)
    if args.no_timing:
        report.pop("wall_time")
    _emit_json(report, args.out)
    ok = report["certified"] and report.get("full_certified", True)
    return EXIT_OK if ok else EXIT_UNCERTIFIED


def cmd_width_sweep(args) -> int:
    cfg = _resolve_config(
        args, "width-sweep",
        dict(n=args.n, d=args.d, label_mode=args.label_mode, seed=args.seed,
             beta_fractions=_parse_floats(args.beta_fractions) if args.beta_fractions else None,
             grid=_parse_ints(args.grid) if args.grid else None,
             cone=True if args.cone else None),
    )
    rows = width_sweep(cfg)
    _emit_csv(rows, args.out)
    certified = all(r["gated_certified"] and r.get("cone_certified", True) for r in rows)
    return EXIT_OK if certified else EXIT_UNCERTIFIED


def cmd_drift(args) -> int:
    lr = None
    if args.lr is not None:
        lr = "backtracking" if args.lr == "backtracking" else float(args.lr)
    cfg = _resolve_config(
        args, "drift",
        dict(n=args.n, d=args.d, m=args.m, steps=args.steps, beta=args.beta, lr=lr,
             snapshot_every=args.snapshot_every, label_mode=args.label_mode,
             seeds=_parse_ints(args.seeds) if args.seeds else ((args.seed,) if args.seed is not None else None),
             data=args.data),
    )
    results = run_drift(cfg, jobs=args.jobs)
    _emit_csv(drift_rows(results, args.every), args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import run_checks

    def show(res):
        print(res.line(), flush=True)

    results = run_checks(args.only.split(",") if args.only else None, jobs=args.jobs, report=show)
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed")
    if args.out:
        _emit_json([{k: v for k, v in vars(r).items() if k != "details"} for r in results], args.out)
    return EXIT_OK if passed == len(results) else EXIT_VERIFY_FAILED


# -- parser ------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, config: bool = False) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--out", default=None, help="output path (default: standard output)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for seed-indexed trials")
    if config:
        p.add_argument("--config", default=None, help="JSON config file; command-line options override it")
        p.add_argument("--save-config", default=None, help="write the effective config as JSON")


def _solver_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--patterns", required=True, help="pattern file")
    p.add_argument("--beta", type=float, default=None, help="override the dataset's beta")
    p.add_argument("--tol", type=float, default=None, help="certification tolerance")
    p.add_argument("--max-iters", type=int, default=20000)
    p.add_argument("--step-rule", choices=("fixed", "backtracking"), default="fixed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relugap",
        description="Sampled convex relaxations of two-layer ReLU networks: solvers, bounds and experiments.",
        epilog=f"Threshold computations use delta = {DEFAULT_DELTA} unless --delta is given. "
        "Exit codes: 0 ok, 2 config/input error, 3 uncertified solve, 4 failed verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a Gaussian dataset")
    _common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--label-mode", choices=LABEL_MODES, default="random_gaussian")
    p.add_argument("--hidden", type=int, default=2, help="teacher width for planted_network labels")
    p.add_argument("--labels", default=None, help="label file for label_mode=file")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sample", help="sample, enumerate or pair activation patterns")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--mode", choices=("distinct", "raw", "enumerate", "paired"), default="distinct",
                   help="distinct: COUNT distinct masks; raw: masks of COUNT gates, deduplicated")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("solve-gated", help="solve the gated group lasso")
    _common(p)
    _solver_opts(p)
    p.set_defaults(func=cmd_solve_gated)

    p = sub.add_parser("solve-cone", help="solve the cone-constrained relaxation")
    _common(p)
    _solver_opts(p)
    p.set_defaults(func=cmd_solve_cone)

    p = sub.add_parser("decompose", help="minimum-norm cone decomposition and sharpness")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--patterns", required=True)
    p.add_argument("--index", type=int, default=0, help="pattern index in the file")
    p.add_argument("--w", required=True, help="direction, comma-separated (normalized internally)")
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--max-iters", type=int, default=20000)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("bounds", help="bound report for one dataset")
    _common(p, config=True)
    p.add_argument("--data", default=None, help="dataset file (otherwise generated)")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--label-mode", choices=LABEL_MODES, default=None)
    p.add_argument("--delta", type=float, default=None, help=f"failure probability (default {DEFAULT_DELTA})")
    p.add_argument("--sampled", type=int, default=None, help="patterns for G when enumeration is too large")
    p.add_argument("--show", nargs="+", choices=BOUND_FIELDS, default=None, help="print only these bounds")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("train", help="gradient descent on a dataset file")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", default="backtracking", help="'backtracking' or a fixed step size")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--snapshot-every", type=int, default=100)
    p.add_argument("--save-network", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pipeline", help="sample, solve the cone relaxation, map to a network")
    _common(p, config=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--label-mode", choices=LABEL_MODES, default=None)
    p.add_argument("--delta", type=float, default=None, help=f"failure probability (default {DEFAULT_DELTA})")
    p.add_argument("--m", type=int, default=None, help="network width (default: the width floor)")
    p.add_argument("--no-timing", action="store_true", help="omit wall time for byte-identical reruns")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("width-sweep", help="objective against the number of sampled patterns")
    _common(p, config=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--label-mode", choices=LABEL_MODES, default=None)
    p.add_argument("--beta-fractions", default=None, help="comma-separated multiples of the zero-solution beta")
    p.add_argument("--grid", default=None, help="comma-separated increasing pattern counts")
    p.add_argument("--cone", action="store_true", help="also solve the cone-constrained relaxation")
    p.set_defaults(func=cmd_width_sweep)

    p = sub.add_parser("drift", help="activation-pattern drift during gradient descent")
    _common(p, config=True)
    p.add_argument("--data", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lr", default=None)
    p.add_argument("--snapshot-every", type=int, default=None)
    p.add_argument("--label-mode", choices=LABEL_MODES, default=None)
    p.add_argument("--seeds", default=None, help="seed list '0,1,2' or range '0:100'")
    p.add_argument("--every", type=int, default=1, help="write every k-th step")
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("verify", help="run the statistical acceptance checks")
    _common(p)
    p.add_argument("--only", default=None, help="comma-separated check names")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (RelugapError, ValueError, OSError) as exc:
        print(f"relugap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
