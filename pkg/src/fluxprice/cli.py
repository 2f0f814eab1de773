"""Command-line surface.

Subcommands: ``solve`` (equilibrium on a scenario file), ``simulate``
(finite-population experiments), ``ancillary`` (dispatch-approximation
experiment), ``twostage`` (benchmark tables and sweeps), ``verify``
(recompute the pinned reference results; nonzero exit on mismatch).

Exit codes: 1 scenario/validation failure, 2 solver non-convergence,
3 verification mismatch.  The default seed is fixed for reproducibility and
can be overridden with the FLUXPRICE_SEED environment variable.  Output CSV
files are byte-identical for identical arguments and seed at any thread
count; ``--stamp`` prepends a timestamp comment line (off by default).
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .ancillary import error_experiment, write_error_csv
from .equilibrium import (
    DEFAULT_SEED,
    NonConvergenceError,
    SolveConfig,
    solve_doe,
    solve_flat,
    solve_mcp,
    write_solve_csv,
)
from .finite_game import deviation_gain, simulate_symmetric, welfare_gap, write_experiment_csv
from .golden import run_verify
from .pricing import write_price_csv
from .scenario import validate
from .scenario_io import load_scenario_file
from .twostage import run_tables, sweep, write_records_csv

EXIT_VALIDATION = 1
EXIT_NONCONVERGENCE = 2
EXIT_VERIFY_MISMATCH = 3


def _default_seed() -> int:
    env = os.environ.get("FLUXPRICE_SEED")
    return int(env) if env else DEFAULT_SEED


def _grid(spec: str) -> np.ndarray:
    """Parse 'start:stop:step' (inclusive stop) or a comma list."""
    if ":" in spec:
        start, stop, step = (float(x) for x in spec.split(":"))
        return np.round(np.arange(start, stop + 0.5 * step, step), 10)
    return np.array([float(x) for x in spec.split(",")])


def _stamp(path: str, enabled: bool) -> None:
    if not enabled:
        return
    with open(path, "r", encoding="utf-8") as fh:
        body = fh.read()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        fh.write(body)


def _load_validated(path: str):
    try:
        scenario = load_scenario_file(path)
    except FileNotFoundError:
        print(f"error: scenario file not found: {path}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)
    except Exception as exc:  # malformed file
        print(f"error: cannot parse scenario file {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)
    report = validate(scenario)
    if not report.ok:
        print(f"error: scenario failed validation:\n{report}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)
    return scenario


def _cmd_solve(args) -> int:
    scenario = _load_validated(args.scenario)
    cfg = SolveConfig(seed=args.seed)
    if args.tol is not None:
        cfg.tol = args.tol
        cfg.fp_tol = args.tol
    try:
        if args.mechanism == "proposed":
            report = solve_doe(scenario, s0=args.s0, config=cfg)
        elif args.mechanism == "mcp":
            report = solve_mcp(scenario, s0=args.s0, config=cfg)
        else:
            report = solve_flat(scenario, s0=args.s0, rate=args.rate, config=cfg)
    except NonConvergenceError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        if exc.residual_history:
            print("residual history (tail): "
                  + ", ".join(f"{r:.3g}" for r in exc.residual_history[-10:]), file=sys.stderr)
        return EXIT_NONCONVERGENCE
    print(f"{report.mechanism}: welfare {report.welfare.total:.6f}, "
          f"{report.residual_kind} residual {report.residual:.3g}, "
          f"{report.iterations} iterations")
    if report.value_gaps:
        print("best-response value gaps: " + ", ".join(f"{g:.3g}" for g in report.value_gaps))
    if args.out:
        write_solve_csv(report, scenario, args.out)
        _stamp(args.out, args.stamp)
        print(f"wrote {args.out}")
    if args.prices_out:
        write_price_csv(report.prices, args.prices_out)
        _stamp(args.prices_out, args.stamp)
        print(f"wrote {args.prices_out}")
    return 0


def _cmd_simulate(args) -> int:
    scenario = _load_validated(args.scenario)
    cfg = SolveConfig(seed=args.seed)
    try:
        base = solve_mcp(scenario, config=cfg) if args.mechanism == "mcp" else solve_doe(scenario, config=cfg)
    except NonConvergenceError as exc:
        print(f"error: conforming strategy solve failed: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    strategy = base.strategy
    n_values = [int(x) for x in args.n.split(",")]
    rows = []
    if args.experiment == "welfare":
        for n in n_values:
            res = simulate_symmetric(scenario, strategy, n, draws=args.draws, seed=args.seed)
            rows.append({"experiment": "realized_welfare", "n": n, "draws": args.draws,
                         "seed": args.seed, "mean": res.mean, "stderr": res.stderr,
                         "metric": "welfare_per_capita"})
    elif args.experiment == "deviation":
        for n in n_values:
            res = deviation_gain(scenario, strategy, n, seed=args.seed, draws=args.draws,
                                 threads=args.threads)
            for x, tid in enumerate(res.type_ids):
                rows.append({"experiment": "deviation_gain", "n": n, "draws": args.draws,
                             "seed": args.seed, "mean": float(res.mean_by_type[x]),
                             "stderr": float(res.stderr_by_type[x]),
                             "metric": f"gain:{tid}"})
    else:
        for res in welfare_gap(scenario, strategy, n_values, draws=args.draws,
                               seed=args.seed, threads=args.threads):
            rows.append({"experiment": "welfare_gap", "n": res.n, "draws": args.draws,
                         "seed": args.seed, "mean": res.mean, "stderr": res.stderr,
                         "metric": "gap_per_capita"})
    for r in rows:
        print(f"{r['experiment']} n={r['n']} {r['metric']}: {r['mean']:.6g} (stderr {r['stderr']:.3g})")
    if args.out:
        write_experiment_csv(rows, args.out)
        _stamp(args.out, args.stamp)
        print(f"wrote {args.out}")
    return 0


def _cmd_ancillary(args) -> int:
    ratios = _grid(args.ratios)
    points = error_experiment(ratios=ratios, horizon=args.horizon,
                              trials=args.trials, seed=args.seed)
    for p in points:
        print(f"r_b={p.r_b} r_d={p.r_d} omega/r_b={p.omega_over_rb}: "
              f"mean_rel_error={p.mean_rel_error:.5f} shed_rate={p.shed_rate:.4f}")
    if args.out:
        write_error_csv(points, args.out)
        _stamp(args.out, args.stamp)
        print(f"wrote {args.out}")
    return 0


def _cmd_twostage(args) -> int:
    cfg = SolveConfig(seed=args.seed)
    try:
        if args.sweep:
            records = sweep(_grid(args.e_grid), _grid(args.b0_grid), config=cfg)
        else:
            rows = run_tables(args.E, args.b0, config=cfg)
            records = [rows[m] for m in ("flat", "mcp", "proposed")]
            for r in records:
                print(f"{r.mechanism:9s} a0={r.a0:.4f} a1={r.a1:.4f} welfare={r.welfare:.4f} "
                      f"p0+w0={r.p0w0:.4f} p1+w1={r.p1w1:.4f} q1={r.q1:.4f} "
                      f"avg_ex={r.avg_price_exq:.4f} avg_inc={r.avg_price_incq:.4f}")
    except NonConvergenceError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    if args.out:
        write_records_csv(records, args.out)
        _stamp(args.out, args.stamp)
        print(f"wrote {args.out}")
    return 0


def _cmd_verify(args) -> int:
    ok, lines = run_verify(args.out, seed=args.seed, threads=args.threads, quick=args.quick)
    for line in lines:
        print(line)
    if not ok:
        print("verification FAILED", file=sys.stderr)
        return EXIT_VERIFY_MISMATCH
    print("verification passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluxprice", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    seed = _default_seed()

    def common(p):
        p.add_argument("--seed", type=int, default=seed)
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--out", default=None, help="output CSV path")
        p.add_argument("--stamp", action="store_true", help="prepend a timestamp comment to outputs")

    p = sub.add_parser("solve", help="solve an equilibrium on a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--mechanism", choices=["proposed", "mcp", "flat"], default="proposed")
    p.add_argument("--s0", default=None, help="initial exogenous state (default: first)")
    p.add_argument("--rate", type=float, default=None, help="flat retail rate (flat mechanism)")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--prices-out", default=None)
    common(p)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("simulate", help="finite-population experiments")
    p.add_argument("--scenario", required=True)
    p.add_argument("--experiment", choices=["welfare", "deviation", "gap"], required=True)
    p.add_argument("--mechanism", choices=["proposed", "mcp"], default="proposed")
    p.add_argument("--n", required=True, help="population sizes, comma separated")
    p.add_argument("--draws", type=int, default=32)
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("ancillary", help="dispatch-cost approximation experiment")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--ratios", default="0.5:6:0.5", help="omega/r_b grid, start:stop:step")
    p.add_argument("--horizon", type=int, default=24)
    common(p)
    p.set_defaults(func=_cmd_ancillary)

    p = sub.add_parser("twostage", help="benchmark tables and sweeps")
    p.add_argument("--E", type=float, default=0.0)
    p.add_argument("--b0", type=float, default=1.12)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--e-grid", default="0:0.1:0.02")
    p.add_argument("--b0-grid", default="1.12:1.2:0.01")
    common(p)
    p.set_defaults(func=_cmd_twostage)

    p = sub.add_parser("verify", help="recompute pinned reference results")
    p.add_argument("--quick", action="store_true", help="smaller grids and trial counts")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default="verify_out")
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
