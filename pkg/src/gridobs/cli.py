"""Command-line interface wiring ingestion, simulation, estimation, placement.

Exit codes: 0 success, 2 numerical non-convergence, 3 input/config error.
All numeric output is written at full double precision so identical
configurations (and seeds) produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, netmodel, observability, pipeline, placement
from .errors import ConvergenceError, GridObsError, SimulationError
from .integrator import Scheme, SimConfig, simulate, write_trajectory_csv
from .netmodel import Disturbance

EXIT_OK = 0
EXIT_NUMERICAL = 2
EXIT_INPUT = 3


def _fmt(x):
    return format(float(x), ".17g")


def _json_dump(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path == "-":
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text + "\n")


def _add_common(p):
    p.add_argument("--case", required=True, help="MATPOWER .m subset or canonical JSON case")
    p.add_argument("--dyn", default=None, help="generator dynamics sidecar (default: <case>_dyn.json)")
    p.add_argument("--scheme", default="bdf3", help="be | bdf2..bdf5 | ti (default bdf3)")
    p.add_argument("--mode", default="mu", choices=("mu", "ndae"))
    p.add_argument("--mu", type=float, default=1e-6)
    p.add_argument("--h", type=float, default=0.1)
    p.add_argument("--t-end", type=float, default=30.0)
    p.add_argument("--alpha-l", type=float, default=0.0, help="load disturbance in percent")
    p.add_argument("--alpha-r", type=float, default=None,
                   help="renewable disturbance in percent (default: alpha-l)")
    p.add_argument("--renewable-fraction", type=float, default=0.2)
    p.add_argument("--nr-tol", type=float, default=1e-2)
    p.add_argument("--nr-max-iter", type=int, default=10)
    p.add_argument("--governor-sign", default="stable", choices=("stable", "printed"))
    p.add_argument("--startup-substeps", type=int, default=1,
                   help="trapezoidal substeps per multistep startup interval (1 = order ramp)")
    p.add_argument("--threads", type=int, default=1, help="worker cap (accepted for compatibility)")
    p.add_argument("--config", default=None, help="JSON file with defaults for any flag")


def _apply_config_file(args, parser, command_parsers):
    """Fill flags from a JSON config; explicit command-line values win."""
    if args.config is None:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config file: {exc}")
    sub = command_parsers[args.command]
    merged = vars(args).copy()
    for key, value in overrides.items():
        key = key.replace("-", "_")
        if key not in merged:
            parser.error(f"unknown config key {key!r}")
        if merged[key] == sub.get_default(key):
            merged[key] = value
    return argparse.Namespace(**merged)


def _sim_config(args):
    return SimConfig(
        mode=args.mode,
        mu=args.mu,
        t_end=args.t_end,
        nr_tol=args.nr_tol,
        nr_max_iter=args.nr_max_iter,
        governor_sign=args.governor_sign,
        startup_substeps=args.startup_substeps,
    )


def _disturbance(args):
    alpha_r = args.alpha_l if args.alpha_r is None else args.alpha_r
    return Disturbance(args.alpha_l, alpha_r, args.renewable_fraction)


def _prepare(args):
    return pipeline.prepare_case(
        args.case,
        args.dyn,
        renewable_fraction=args.renewable_fraction,
        governor_sign=args.governor_sign,
    )


def cmd_convert(args):
    in_path = Path(args.input)
    if not in_path.exists():
        print(f"error: no such file: {in_path}", file=sys.stderr)
        return EXIT_INPUT
    _, _, dropped = netmodel.read_matpower_tables(in_path)
    if dropped:
        print(
            "warning: unsupported tables dropped: " + ", ".join(sorted(dropped)),
            file=sys.stderr,
        )
    case = netmodel.parse_matpower_case(in_path, args.dyn)
    _json_dump(netmodel.case_to_json(case), args.output)
    return EXIT_OK


def cmd_simulate(args):
    prep = _prepare(args)
    scheme = Scheme.from_name(args.scheme, args.h)
    cfg = _sim_config(args)
    traj = simulate(prep.x0, prep.u0, prep.case, scheme, cfg, _disturbance(args))
    write_trajectory_csv(traj, prep.case.layout, args.out)
    return EXIT_OK


def cmd_validate_mu(args):
    prep = _prepare(args)
    scheme = Scheme.from_name(args.scheme, args.h)
    cfg = _sim_config(args)
    mus = [float(m) for m in args.mu_list.split(",") if m]
    rows = pipeline.run_mu_sweep(prep, scheme, cfg, _disturbance(args), mus)
    with open(args.out, "w") as fh:
        fh.write("mu,rmse,stacked_error,converged\n")
        for mu, r, s, conv in rows:
            fh.write(f"{_fmt(mu)},{_fmt(r)},{_fmt(s)},{str(conv).lower()}\n")
    if not any(conv for _, _, _, conv in rows):
        print("error: no mu value converged against the reference", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _selection(args, n_bus):
    if args.all_buses:
        return observability.SensorSelection.all_buses(n_bus)
    buses = [int(b) for b in args.buses.split(",") if b.strip()] if args.buses else []
    return observability.SensorSelection.of(buses)


def cmd_estimate(args):
    prep = _prepare(args)
    scheme = Scheme.from_name(args.scheme, args.h)
    cfg = _sim_config(args)
    d = _disturbance(args)
    sel = _selection(args, prep.case.n_bus)
    if sel.p == 0:
        print("error: empty sensor selection", file=sys.stderr)
        return EXIT_INPUT
    mhe_cfg = pipeline.make_mhe_config(
        prep, d, n_obs=args.n_obs, gn_tol=args.gn_tol, gn_max_iter=args.gn_max_iter,
        governor_sign=args.governor_sign,
    )
    truth = pipeline.build_truth(prep, d, scheme, cfg, args.n_obs, args.noise_pct, args.seed)
    report = pipeline.estimate_initial_state(truth, sel, scheme, cfg, mhe_cfg)
    _json_dump(report.to_dict(), args.out)
    return EXIT_OK


def _study(args, p_values, evaluate, brute_force=False):
    prep = _prepare(args)
    scheme = Scheme.from_name(args.scheme, args.h)
    cfg = _sim_config(args)
    return pipeline.run_opp_study(
        prep,
        scheme,
        cfg,
        _disturbance(args),
        p_values,
        noise_pct=args.noise_pct,
        seed=args.seed,
        n_obs=args.n_obs,
        evaluate=evaluate,
        mhe_overrides={"gn_tol": args.gn_tol, "gn_max_iter": args.gn_max_iter},
        brute_force=brute_force,
    ), prep


def cmd_place(args):
    prep = _prepare(args)
    if not 0 <= args.p <= prep.case.n_bus:
        print(f"error: p={args.p} outside 0..{prep.case.n_bus}", file=sys.stderr)
        return EXIT_INPUT
    study, _ = _study(args, [args.p], evaluate=args.evaluate, brute_force=False)
    res = study.results[0]
    out = res.to_dict()
    if args.brute_force:
        bf = placement.solve_bruteforce(study.contributions, args.p)
        out["verified"] = bf.buses == res.buses
    if args.evaluate:
        out["epsilon"] = study.epsilons[0]
    rep = res.conditioning
    out["observability"] = rep.to_dict(
        selection=observability.SensorSelection.of(res.buses),
        per_bus_trace=[c.trace for c in study.contributions],
    )
    _json_dump(out, args.out)
    return EXIT_OK


def cmd_sweep(args):
    prep = _prepare(args)
    fractions = [float(f) for f in args.fractions.split(",") if f]
    p_values = pipeline.fraction_counts(fractions, prep.case.n_bus)
    study, _ = _study(args, p_values, evaluate=not args.no_epsilon)
    with open(args.out, "w") as fh:
        fh.write("p,buses,objective,epsilon,nested\n")
        for res, eps in zip(study.results, study.epsilons):
            eps_s = "" if eps is None else _fmt(eps)
            fh.write(
                f"{len(res.buses)},{';'.join(str(b) for b in res.buses)},"
                f"{_fmt(res.objective)},{eps_s},{str(study.nested).lower()}\n"
            )
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gridobs",
        description="Grid DAE simulation, moving-horizon estimation, and PMU placement",
    )
    parser.add_argument("--version", action="version", version=f"gridobs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    p = commands["convert"] = sub.add_parser("convert", help="MATPOWER .m subset -> canonical JSON")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--dyn", default=None)
    p.set_defaults(func=cmd_convert)

    p = commands["simulate"] = sub.add_parser("simulate", help="write a trajectory CSV (t, state columns)")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = commands["validate-mu"] = sub.add_parser("validate-mu", help="RMSE of the relaxed model vs the DAE per mu")
    _add_common(p)
    p.add_argument("--mu-list", default="1e-2,1e-3,1e-4,1e-5,1e-6,1e-7,1e-8,1e-9")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_validate_mu)

    p = commands["estimate"] = sub.add_parser("estimate", help="Gauss-Newton initial-state estimate (JSON report)")
    _add_common(p)
    p.add_argument("--buses", default="", help="comma-separated PMU buses")
    p.add_argument("--all-buses", action="store_true")
    p.add_argument("--noise-pct", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-obs", type=int, default=10)
    p.add_argument("--gn-tol", type=float, default=1e-4)
    p.add_argument("--gn-max-iter", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = commands["place"] = sub.add_parser("place", help="optimal placement for a fixed sensor count (JSON)")
    _add_common(p)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--noise-pct", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-obs", type=int, default=10)
    p.add_argument("--gn-tol", type=float, default=1e-4)
    p.add_argument("--gn-max-iter", type=int, default=200)
    p.add_argument("--brute-force", action="store_true", help="verify against enumeration")
    p.add_argument("--evaluate", action="store_true", help="report downstream epsilon")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_place)

    p = commands["sweep"] = sub.add_parser("sweep", help="placement sweep over sensor fractions (CSV)")
    _add_common(p)
    p.add_argument("--fractions", default="0.2,0.4,0.6,0.8")
    p.add_argument("--noise-pct", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-obs", type=int, default=10)
    p.add_argument("--gn-tol", type=float, default=1e-4)
    p.add_argument("--gn-max-iter", type=int, default=200)
    p.add_argument("--no-epsilon", action="store_true", help="skip downstream error evaluation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser, commands


def main(argv=None):
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        args = _apply_config_file(args, parser, commands)
    try:
        return args.func(args)
    except (SimulationError, ConvergenceError) as exc:
        step = f" at step {exc.step}" if getattr(exc, "step", None) is not None else ""
        print(f"error: numerical failure{step}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (GridObsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
