"""Command-line front end.

Subcommands: validate, solve-once, simulate, experiment, sweep, prices.
All tabular output is CSV with a fixed float format so identical seeds give
byte-identical files; wall-clock timings and other non-reproducible details
go to a metadata JSON next to the CSVs.

Exit codes: 0 success, 1 usage, 2 validation, 3 infeasible model,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .casefile import CaseFile, build_system, load_case, shipped_case_path
from .errors import (InfeasibleModelError, NumericalError,
                     SolverToleranceError, ValidationError)
from .pricing import extract_prices, settlement
from .qp_core import solve_qp
from .robust_builder import assemble_robust_program, extract_policies
from .sim_harness import (Scheme, run_experiment, run_receding_horizon,
                          sensitivity_sweep)
from .uncertainty import build_uncertainty_polytope, estimate_moments

__all__ = ["main", "CaseFile", "load_case"]

OUTDIR_ENV = "AFFINE_RESERVES_OUT"
_MOMENT_STREAM = 1   # must match the simulation harness seeding layout


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_metadata(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(args):
    out = args.out or os.environ.get(OUTDIR_ENV) or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args):
    case = load_case(args.case)
    system = build_system(case)
    if args.full_scale:
        from dataclasses import replace
        system = replace(system, sim_runs=50, sim_steps=288, n_mc=20000)
    return case, system


def _moments_rng(seed, run, t):
    return np.random.default_rng(
        np.random.SeedSequence((seed, run, _MOMENT_STREAM, t)))


def _solve_frame(system, scheme, seed):
    """Solve the first frame: the policy the operator would commit to now."""
    rng = _moments_rng(seed, 0, 0)
    moments = estimate_moments(system.q0, system.process, system.T,
                               system.n_mc, rng)
    delta = build_uncertainty_polytope(system.q0, system.process, system.T,
                                       moments)
    states = {p.id: p.x0 for p in system.elastic}
    parts = system.frame_participants(0, states, moments.mean_q)
    program = assemble_robust_program(parts, system.flowmap, delta, moments,
                                      band=scheme.band(system.T))
    solution = solve_qp(program, system.solver_settings())
    if solution.status == "infeasible":
        raise InfeasibleModelError(
            f"robust program infeasible: {solution.message}")
    if solution.status != "optimal":
        raise NumericalError(f"solver stopped: {solution.message}")
    return program, solution, moments


def _meta_common(case, system, args):
    return {
        "case": str(args.case),
        "case_hash": case.content_hash(),
        "version": __version__,
        "horizon": system.T,
        "tau_hours": system.tau,
    }


def cmd_validate(args):
    case, system = _load(args)
    counts = {
        "generators": len(case.raw["participants"]["generators"]),
        "storage": len(case.raw["participants"]["storage"]),
        "loads": len(case.raw["participants"]["loads"]),
        "wind": len(case.raw["uncertainty"]["wind"]),
    }
    total = sum(counts.values())
    print(f"{args.case}: ok ({total} participants: "
          + ", ".join(f"{v} {k}" for k, v in counts.items())
          + f"; {system.n_nodes} nodes, {len(system.grid.lines)} lines)")
    print(f"content hash {case.content_hash()[:16]}")
    return 0


def cmd_solve_once(args):
    case, system = _load(args)
    scheme = Scheme.parse(args.scheme)
    if scheme.kind == "prescient":
        raise ValidationError("solve-once needs a policy scheme, not prescient")
    seed = args.seed if args.seed is not None else system.base_seed
    out = _outdir(args)
    t0 = time.perf_counter()
    program, solution, moments = _solve_frame(system, scheme, seed)
    policies = extract_policies(program, solution)
    elapsed = time.perf_counter() - t0

    _write_csv(out / "schedule.csv", ["participant", "step", "power_mw"],
               [(pid, k, pol.e[k])
                for pid, pol in sorted(policies.items())
                for k in range(system.T)])
    _write_csv(out / "response.csv", ["participant", "row", "col", "gain"],
               [(pid, r, c, pol.D[r, c])
                for pid, pol in sorted(policies.items())
                for r in range(pol.D.shape[0])
                for c in range(pol.D.shape[1])
                if pol.D[r, c] != 0.0])
    _write_metadata(out / "metadata.json", {
        **_meta_common(case, system, args),
        "command": "solve-once",
        "scheme": scheme.label,
        "seed": seed,
        "objective": solution.obj_primal,
        "duality_gap": solution.gap,
        "iterations": solution.iterations,
        "solve_time_s": solution.solve_time,
        "wall_time_s": elapsed,
        "n_variables": program.n_var,
        "kkt_max_residual": solution.kkt.max_residual() if solution.kkt else None,
    })
    print(f"solved {scheme.label}: objective {solution.obj_primal:.2f}, "
          f"{solution.iterations} iterations -> {out}")
    return 0


def cmd_prices(args):
    case, system = _load(args)
    scheme = Scheme.parse(args.scheme)
    seed = args.seed if args.seed is not None else system.base_seed
    out = _outdir(args)
    program, solution, moments = _solve_frame(system, scheme, seed)
    policies = extract_policies(program, solution)
    prices = extract_prices(solution, program)

    rows = []
    for p in system.elastic:
        lam = prices.lam_i[p.id]
        for k in range(system.T):
            rows.append((p.id, k, lam[k], lam[k] / system.tau))
    _write_csv(out / "nodal_prices.csv",
               ["participant", "step", "price_per_step", "price_per_mwh"],
               rows)
    nd = system.process.n_delta
    policy_rows = []
    for p in system.elastic:
        Pi = prices.Pi_i[p.id]
        for r in range(system.T):
            for c in range((r + 1) * nd):
                if Pi[r, c] != 0.0:
                    policy_rows.append((p.id, r, c, Pi[r, c]))
    _write_csv(out / "policy_prices.csv",
               ["participant", "row", "col", "price"], policy_rows)
    settle_rows = []
    for p in system.elastic:
        s = settlement(policies[p.id], prices, p, moments)
        settle_rows.append((p.id, s.power_payment, s.reserve_payment,
                            s.expected_cost, s.expected_profit))
    _write_csv(out / "settlements.csv",
               ["participant", "power_payment", "reserve_payment",
                "expected_cost", "expected_profit"],
               settle_rows)
    _write_metadata(out / "metadata.json", {
        **_meta_common(case, system, args),
        "command": "prices",
        "scheme": scheme.label,
        "seed": seed,
        "objective": solution.obj_primal,
    })
    print(f"prices written for {len(system.elastic)} participants -> {out}")
    return 0


def cmd_simulate(args):
    case, system = _load(args)
    scheme = Scheme.parse(args.scheme)
    seed = args.seed if args.seed is not None else system.base_seed
    n_steps = args.steps or system.sim_steps
    out = _outdir(args)
    t0 = time.perf_counter()
    res = run_receding_horizon(system, scheme, seed, run_index=args.run,
                               n_steps=n_steps,
                               settings=system.solver_settings())
    elapsed = time.perf_counter() - t0
    if res.aborted:
        raise InfeasibleModelError(
            f"run aborted at step {res.abort_step}: {res.abort_reason}")

    storage_ids = [p.id for p in system.elastic if p.x0.size == 3]
    header = (["step", "hour", "load_mw", "wind_mw"]
              + [p.id for p in system.elastic]
              + [f"{sid}_level_mwh" for sid in storage_ids]
              + ["cost"])
    rows = []
    for t in range(res.n_steps):
        load = sum(p_nom for _, _, p_nom in system.loads) \
            * system.profile_value(t)
        wind = sum(g @ res.q_path[t + 1] for _, _, g in system.winds)
        row = [t, t * system.tau, -load, wind]
        row += [res.inputs[p.id][t] for p in system.elastic]
        row += [res.states[sid][t + 1][2] for sid in storage_ids]
        row.append(res.cost_per_step[t])
        rows.append(row)
    _write_csv(out / "trace.csv", header, rows)
    _write_metadata(out / "metadata.json", {
        **_meta_common(case, system, args),
        "command": "simulate",
        "scheme": scheme.label,
        "seed": seed,
        "run": args.run,
        "steps": res.n_steps,
        "realized_cost": res.realized_cost,
        "n_solves": res.n_solves,
        "mean_solve_time_s": float(np.mean(res.solve_times)),
        "wall_time_s": elapsed,
        "max_balance_residual_mw": res.max_balance_residual,
        "max_flow_excess_mw": res.max_flow_excess,
        "max_local_violation": res.max_local_violation,
    })
    print(f"simulated {scheme.label}, {res.n_steps} steps: "
          f"cost {res.realized_cost:.2f} -> {out}")
    return 0


def _scheme_list(arg, default):
    labels = [s.strip() for s in arg.split(",")] if arg else list(default)
    return [Scheme.parse(s) for s in labels]


def cmd_experiment(args):
    case, system = _load(args)
    schemes = _scheme_list(args.schemes, system.scheme_labels)
    n_runs = args.runs or system.sim_runs
    seed = args.seed if args.seed is not None else system.base_seed
    n_steps = args.steps or system.sim_steps
    out = _outdir(args)
    t0 = time.perf_counter()
    exp = run_experiment(system, schemes, n_runs, seed, n_steps=n_steps,
                         settings=system.solver_settings())
    elapsed = time.perf_counter() - t0

    labels = exp.schemes
    metrics = ["runs", "mean_cost", "std_cost", "se_cost"]
    reserve_metrics = ["mean_reserve_cost", "se_reserve_cost",
                       "mean_increase_pct"]
    has_prescient = "prescient" in labels
    table = []
    for m in metrics:
        table.append([m] + [exp.scheme_stats(l)[m] for l in labels])
    if has_prescient:
        for m in reserve_metrics:
            table.append([m] + [exp.reserve_stats(l)[m] for l in labels])
        policy_labels = [l for l in labels if l != "prescient"]
        if len(policy_labels) >= 2:
            base = policy_labels[0]
            table.append(
                [f"reserve_ratio_vs_{base}"]
                + [exp.reserve_ratio(l, base) if l != "prescient"
                   else float("nan") for l in labels])
    _write_csv(out / "comparison.csv", ["metric"] + labels, table)
    _write_csv(out / "per_run.csv",
               ["run", "excluded"] + labels,
               [[r, int(r in exp.excluded_runs)]
                + [exp.results[(l, r)].realized_cost for l in labels]
                for r in range(exp.n_runs)])
    _write_metadata(out / "metadata.json", {
        **_meta_common(case, system, args),
        "command": "experiment",
        "schemes": labels,
        "runs": n_runs,
        "steps": n_steps,
        "seed": seed,
        "excluded_runs": exp.excluded_runs,
        "wall_time_s": elapsed,
        "mean_solve_time_s": {
            l: exp.scheme_stats(l)["mean_solve_time"] for l in labels},
    })
    done = len(exp.completed_runs())
    print(f"experiment: {done}/{n_runs} runs over {labels} -> {out}")
    return 0


def cmd_sweep(args):
    case, system = _load(args)
    phis = ([float(p) for p in args.phi.split(",")] if args.phi
            else list(system.phi_values))
    schemes = _scheme_list(args.schemes, system.scheme_labels)
    n_runs = args.runs or min(system.sim_runs, 5)
    seed = args.seed if args.seed is not None else system.base_seed
    n_steps = args.steps or system.sim_steps
    out = _outdir(args)
    t0 = time.perf_counter()
    rows = sensitivity_sweep(system, phis, n_runs, seed, schemes=schemes,
                             n_steps=n_steps,
                             settings=system.solver_settings())
    elapsed = time.perf_counter() - t0

    policy_labels = [s.label for s in schemes if s.kind != "prescient"]
    header = (["phi", "wind_capacity_gw"]
              + [f"reserve_pct_{l}" for l in policy_labels]
              + ["saving_pct", "completed_runs", "excluded_runs"])
    table = []
    for row in rows:
        cap = system.scaled(row["phi"]).wind_capacity_mw() / 1000.0
        table.append([row["phi"], cap]
                     + [row.get(f"increase_pct[{l}]", float("nan"))
                        for l in policy_labels]
                     + [row.get("saving_pct", float("nan")),
                        row["completed_runs"], row["excluded_runs"]])
    _write_csv(out / "sensitivity.csv", header, table)
    _write_metadata(out / "metadata.json", {
        **_meta_common(case, system, args),
        "command": "sweep",
        "phi": phis,
        "schemes": [s.label for s in schemes],
        "runs": n_runs,
        "steps": n_steps,
        "seed": seed,
        "wall_time_s": elapsed,
    })
    print(f"sweep over phi={phis}: {len(table)} rows -> {out}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="affine-reserves",
        description="Affine reserve policies: robust dispatch under "
                    "polytopic wind-forecast uncertainty.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, helptext):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("case", nargs="?", default=str(shipped_case_path()),
                       help="case file (default: bundled 39-bus case)")
        p.add_argument("--out", default=None,
                       help=f"output directory (default $%s or ./out)"
                       % OUTDIR_ENV)
        p.add_argument("--seed", type=int, default=None,
                       help="override the case seed")
        p.add_argument("--full-scale", action="store_true",
                       help="full benchmark scale: 50 runs, 288 steps, "
                            "n_mc=20000 (default is desk scale)")
        p.set_defaults(func=fn)
        return p

    add("validate", cmd_validate, "load and check a case file")

    p = add("solve-once", cmd_solve_once,
            "solve the first-frame robust program and emit the policies")
    p.add_argument("--scheme", default="full",
                   help="full | diagonal | banded(k)")

    p = add("prices", cmd_prices,
            "solve the first frame and emit nodal and policy prices")
    p.add_argument("--scheme", default="full")

    p = add("simulate", cmd_simulate,
            "one closed-loop run; emits a plot-ready trace")
    p.add_argument("--scheme", default="full")
    p.add_argument("--run", type=int, default=0,
                   help="realization index within the seed")
    p.add_argument("--steps", type=int, default=None)

    p = add("experiment", cmd_experiment,
            "compare schemes over common-random-number runs")
    p.add_argument("--schemes", default=None,
                   help="comma list, e.g. prescient,diagonal,full")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = add("sweep", cmd_sweep,
            "rerun the comparison across uncertainty scales")
    p.add_argument("--phi", default=None, help="comma list, e.g. 0.4,0.8,1.2")
    p.add_argument("--schemes", default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleModelError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, SolverToleranceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
