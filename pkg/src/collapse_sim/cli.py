"""Command-line front end.

Exit codes: 0 success, 1 statistical check failure (``ensemble --strict``),
2 invalid configuration or arguments, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .closedform import reduction_probability, simulate_trajectory
from .config import ConfigError, RunConfig
from .ensemble import ResourceLimitError, run_all_checks, run_ensemble
from .model import initial_moments, two_state_rate
from .sde_reference import validate_against_closed_form

CSV_VERSION = "# collapse-sim v1"
EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _fmt(x) -> str:
    # repr of a Python float is the shortest string that round-trips exactly
    return repr(float(x))


def trajectory_csv(path, with_amplitudes: bool = False) -> str:
    n = path.pi_t.shape[1]
    header = ["t", "xi", "W", "H", "V", "skew"] + [f"Pi_{i + 1}" for i in range(n)]
    cols = [path.times, path.xi, path.w, path.h, path.v, path.skew] + list(path.pi_t.T)
    if with_amplitudes:
        for i in range(n):
            header += [f"re_{i + 1}", f"im_{i + 1}"]
            cols += [path.amplitudes[:, i].real, path.amplitudes[:, i].imag]
    rows = np.column_stack(cols).tolist()
    lines = [CSV_VERSION, ",".join(header)]
    lines += [",".join(map(_fmt, row)) for row in rows]
    return "\n".join(lines) + "\n"


def _write(path, text):
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from None


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config)
    except OSError as exc:
        raise CliError(f"cannot read {args.config}: {exc.strerror or exc}", EXIT_IO) from None
    except ConfigError as exc:
        raise CliError(f"{args.config}: {exc}", EXIT_CONFIG) from None
    overrides = {
        "sigma": args.sigma,
        "t_max": args.t_max,
        "dt": args.dt,
        "seed": args.seed,
        "reduction_epsilon": args.reduction_epsilon,
        "n_paths": args.n_paths,
    }
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}", EXIT_CONFIG)
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    try:
        return cfg.override(**overrides)
    except ConfigError as exc:
        raise CliError(f"override: {exc}", EXIT_CONFIG) from None


def _workers(cfg: RunConfig):
    env = os.environ.get("COLLAPSE_SIM_THREADS")
    if env is None:
        return cfg.workers
    if env.strip() == "auto":
        return "auto"
    try:
        w = int(env)
    except ValueError:
        raise CliError(f"COLLAPSE_SIM_THREADS must be an integer or 'auto', got {env!r}",
                       EXIT_CONFIG) from None
    if w < 1:
        raise CliError("COLLAPSE_SIM_THREADS must be positive", EXIT_CONFIG)
    return w


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.to_json() + "\n")
        return EXIT_OK
    model = cfg.model()
    path = simulate_trajectory(model, cfg.params(model), args.path_index,
                               criterion=cfg.reduction_criterion)
    out = args.output or cfg.trajectory_csv
    _write(out, trajectory_csv(path, args.with_amplitudes))
    return EXIT_OK


def cmd_ensemble(args) -> int:
    cfg = _load_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.to_json() + "\n")
        return EXIT_OK
    try:
        ens = cfg.ensemble_config(workers=_workers(cfg))
        summary = run_ensemble(ens)
    except (ValueError, ResourceLimitError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    doc = summary.to_dict()
    failed = False
    if not args.skip_tests:
        mid = None
        if cfg.mid_time is not None:
            mid = cfg.mid_time * (1.0 if cfg.time_unit == "time" else cfg.tau_r())
            mid = min(summary.test_times, key=lambda t: abs(t - mid))
        reports = run_all_checks(summary, cfg.reduction_n, mid)
        doc["tests"] = {k: r.to_dict() for k, r in reports.items()}
        failed = any(r.passed is False for r in reports.values())
    _write(args.output or cfg.summary_json, _dump_json(doc))
    return EXIT_CHECKS if (failed and args.strict) else EXIT_OK


def cmd_validate(args) -> int:
    if args.levels < 2:
        raise CliError("--levels must be at least 2", EXIT_CONFIG)
    cfg = _load_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.to_json() + "\n")
        return EXIT_OK
    model = cfg.model()
    params = cfg.params(model)
    factor = args.factor or cfg.refine_factor
    n_seeds = args.seeds or cfg.validation_seeds
    report = validate_against_closed_form(
        model, params.sigma, params.t_max, params.n_steps, args.levels, factor,
        seeds=range(params.seed, params.seed + n_seeds), renormalize=not args.no_renormalize,
    )
    doc = report.to_dict()
    exact = bool(np.all(report.error_table <= 1e-10))
    doc["machine_precision"] = exact
    doc["passed"] = bool(report.monotone or exact)
    _write(args.output or cfg.validation_json, _dump_json(doc))
    return EXIT_CHECKS if (args.strict and not doc["passed"]) else EXIT_OK


def cmd_timescale(args) -> int:
    cfg = _load_config(args)
    model = cfg.model()
    if model.n_levels != 2:
        raise CliError(f"timescale needs a two-state model, got {model.n_levels} levels",
                       EXIT_CONFIG)
    beta = two_state_rate(model, cfg.sigma)
    if beta <= 0:
        raise CliError("sigma must be positive", EXIT_CONFIG)
    tau = cfg.tau_r(model)
    unit = {"time": 1.0, "tau_r": tau, "rate": 1.0 / beta}[args.unit]
    lines = [
        f"# tau_r={_fmt(tau)} beta={_fmt(beta)} 1/beta={_fmt(1.0 / beta)} "
        f"v0={_fmt(initial_moments(model)[1])} n={_fmt(args.n)}",
        "t,t_over_tau_r,beta_t,probability",
    ]
    for x in args.times:
        t = x * unit
        if not t > 0:
            raise CliError(f"times must be positive, got {x!r}", EXIT_CONFIG)
        p = reduction_probability(beta, t, args.n)
        lines.append(",".join(map(_fmt, (t, t / tau, beta * t, p))))
    text = "\n".join(lines) + "\n"
    if args.output:
        _write(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="collapse-sim",
        description="Closed-form simulation of energy-based quantum state reduction.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("-o", "--output", help="output file (overrides the config)")
        p.add_argument("--sigma", type=float)
        p.add_argument("--t-max", type=float)
        p.add_argument("--dt", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--reduction-epsilon", type=float)
        p.add_argument("--n-paths", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config field (value parsed as JSON)")
        p.add_argument("--dump-config", action="store_true",
                       help="print the effective configuration and exit")

    p = sub.add_parser("simulate", help="write one trajectory as CSV")
    common(p)
    p.add_argument("--with-amplitudes", action="store_true")
    p.add_argument("--path-index", type=int, default=0,
                   help="which path of the seeded ensemble to generate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ensemble", help="run an ensemble and its statistical checks")
    common(p)
    p.add_argument("--skip-tests", action="store_true")
    p.add_argument("--strict", action="store_true", help="exit 1 if any check fails")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("validate", help="closed form vs Euler-Maruyama refinement sweep")
    common(p)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--factor", type=int, help="refinement factor between levels")
    p.add_argument("--seeds", type=int, help="number of seeded paths")
    p.add_argument("--no-renormalize", action="store_true",
                   help="let the Euler state drift off the unit sphere (diagnostic)")
    p.add_argument("--strict", action="store_true", help="exit 1 unless errors decrease")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("timescale", help="tabulate the two-state reduction probability")
    common(p)
    p.add_argument("--n", type=float, default=10.0, help="threshold exponent, M < exp(-n)")
    p.add_argument("--times", type=float, nargs="+", default=[1.0, 5.0, 20.0])
    p.add_argument("--unit", choices=("time", "tau_r", "rate"), default="tau_r",
                   help="unit of --times: absolute, 1/(sigma^2 V0), or 1/beta")
    p.set_defaults(func=cmd_timescale)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"collapse-sim: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"collapse-sim: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
