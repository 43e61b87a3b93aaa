"""Command-line front end: expressions, moments, bounds, planning, batches.

Subcommands: express, moments, bound, plan, validate, benchmark.  Exit codes
form a stable scripting contract: 0 success, 1 input error, 2 solver or
validation failure.  All outputs are files or stdout text; there is no
interactive mode.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import distmoments, harness, mpcc, planner, polyalg
from .distmoments import GaussianSpec, TruncatedGaussianSpec
from .planner import PlanResult, SolverSettings
from .riskbounds import ConcKind, conc, mixture_bound

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_SOLVER = 2


class InputError(ValueError):
    pass


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}") from None


def _build_polynomial(spec: dict) -> tuple[polyalg.Polynomial, polyalg.DependencyStructure]:
    try:
        variables = spec["variables"]
        terms = spec["terms"]
    except KeyError as e:
        raise InputError(f"constraint spec missing key {e}") from None
    names = [v["name"] for v in variables]
    flags = [bool(v.get("random", True)) for v in variables]
    roster = polyalg.VariableRoster(tuple(names), tuple(flags))
    poly_terms: dict[tuple[int, ...], float] = {}
    for term in terms:
        exps = [0] * len(names)
        for var, e in term.get("exponents", {}).items():
            if var not in names:
                raise InputError(f"unknown variable {var!r} in term exponents")
            exps[names.index(var)] = int(e)
        key = tuple(exps)
        poly_terms[key] = poly_terms.get(key, 0.0) + float(term.get("coeff", 1.0))
    poly = polyalg.Polynomial(roster, poly_terms)
    blocks = spec.get("independent_blocks")
    if blocks is None:
        deps = polyalg.DependencyStructure.joint(roster.random_names)
    else:
        deps = polyalg.DependencyStructure(tuple(tuple(b) for b in blocks))
    return poly, deps


def cmd_express(args) -> int:
    spec = _read_json(args.spec)
    poly, deps = _build_polynomial(spec)
    power = int(spec.get("power", 1))
    poly = polyalg.poly_pow(poly, power)
    mean_expr, second_expr = polyalg.mean_variance_expressions(poly, deps)
    dialect = args.dialect
    out = [
        f"mean: {polyalg.render(mean_expr, dialect)}",
        f"second_moment: {polyalg.render(second_expr, dialect)}",
    ]
    text = "\n".join(out)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _moment_table_from_spec(spec: dict, order: int) -> distmoments.MomentTable:
    family = spec.get("family", "gaussian")
    if family == "gaussian":
        g = GaussianSpec.make(spec["mean"], np.asarray(spec["cov"], dtype=float))
        return distmoments.gaussian_moments(g, order)
    if family == "truncated":
        g = GaussianSpec.make(spec["mean"], np.asarray(spec["cov"], dtype=float))
        t = TruncatedGaussianSpec(g, tuple(spec["lower"]), tuple(spec["upper"]))
        return distmoments.truncated_gaussian_moments(t, order)
    if family == "mixture":
        tables = [_moment_table_from_spec(c, order) for c in spec["components"]]
        weights = [float(c["weight"]) for c in spec["components"]]
        return distmoments.mixture_moments(weights, tables)
    if family == "samples":
        return distmoments.empirical_moments(np.asarray(spec["samples"], dtype=float), order)
    raise InputError(f"unknown distribution family {family!r}")


def cmd_moments(args) -> int:
    spec = _read_json(args.spec)
    table = _moment_table_from_spec(spec, args.order)
    payload = {
        "dimension": table.dimension,
        "order": table.order,
        "entries": {",".join(map(str, k)): v for k, v in sorted(table.entries.items())},
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_bound(args) -> int:
    kind = ConcKind.parse(args.conc)
    if args.components:
        spec = _read_json(args.components)
        comps = [(float(c["weight"]), float(c["mean"]), float(c["var"])) for c in spec]
        bound = mixture_bound(comps, kind)
    else:
        if args.mean is None or args.var is None:
            raise InputError("bound needs --mean and --var (or --components FILE)")
        bound = conc(args.mean, args.var, kind)
    print(json.dumps({"value": bound.value, "conc_star": bound.conc_star, "valid": bound.valid}))
    return EXIT_OK


def cmd_plan(args) -> int:
    source = _read_json(args.problem)
    if args.eps is not None:
        source["per_step_epsilon"] = args.eps
    if args.conc is not None:
        source["conc"] = args.conc
    if args.formulation is not None:
        source["formulation"] = args.formulation
    try:
        problem = planner.load_problem(source, base_dir=Path(args.problem).parent)
    except (planner.PlanError, distmoments.DistributionError, mpcc.PathError) as e:
        raise InputError(str(e)) from None
    settings = SolverSettings(max_iterations=args.max_iter, verbose=args.verbose)
    result = planner.solve(problem, settings)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.save_json(out_dir / "result.json")
    result.save_csv(out_dir / "result.csv")
    if args.plot:
        harness.emit_trajectory_plot(result, problem, out_dir / "trajectory.svg")
    print(
        f"status={result.status} cost={result.cost:.6f} "
        f"time_ms={result.solve_time_ms:.1f} total_risk_bound={result.total_risk_bound:.3e}"
    )
    return EXIT_OK if result.converged else EXIT_SOLVER


def cmd_validate(args) -> int:
    res_data = _read_json(args.result)
    source = _read_json(args.problem)
    try:
        problem = planner.load_problem(source, base_dir=Path(args.problem).parent)
    except (planner.PlanError, distmoments.DistributionError, mpcc.PathError) as e:
        raise InputError(str(e)) from None
    result = _result_from_json(res_data)
    report = harness.validate_plan(result, problem, n_samples=args.samples, seed=args.seed)
    feas = planner.check_feasibility(result, problem)
    payload = report.to_json_dict()
    payload["constraint_check"] = {
        "dynamics_residual": feas.dynamics_residual,
        "bound_violation": feas.bound_violation,
        "risk_margin": feas.risk_margin,
        "conc_star_max": feas.conc_star_max,
        "feasible": feas.feasible,
    }
    text = json.dumps(payload, indent=2)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "validation.json").write_text(text + "\n")
    sound = report.sound_vs_bound and (
        report.sound_vs_epsilon if result.formulation == "chance" else True
    )
    print("all steps sound" if sound else "SOUNDNESS VIOLATION")
    return EXIT_OK if sound else EXIT_SOLVER


def _result_from_json(data: dict) -> PlanResult:
    try:
        states = np.asarray(data["states"], dtype=float)
        controls = np.asarray(data["controls"], dtype=float)
    except KeyError as e:
        raise InputError(f"result file missing key {e}") from None
    return PlanResult(
        states=states,
        controls=controls,
        status=data.get("status", "unknown"),
        cost=float(data.get("cost", 0.0)),
        solve_time_ms=float(data.get("solve_time_ms", 0.0)),
        iterations=int(data.get("iterations", 0)),
        kkt_residual=float(data.get("kkt_residual", 0.0)),
        dynamics_residual=float(data.get("dynamics_residual", 0.0)),
        bound_violation=float(data.get("bound_violation", 0.0)),
        risk_values=np.asarray(data.get("risk_values", []), dtype=float),
        risk_per_step=np.asarray(data.get("risk_per_step", []), dtype=float),
        conc_star=np.asarray(data.get("conc_star", []), dtype=float),
        total_risk_bound=float(data.get("total_risk_bound", 0.0)),
        epsilon=(np.asarray(data["epsilon"], dtype=float) if data.get("epsilon") else None),
        formulation=data.get("formulation", "chance"),
    )


def cmd_benchmark(args) -> int:
    spec = _read_json(args.spec)
    known = {"seeds", "n_scenarios", "base_seed", "eps_grid", "formulations",
             "perturbation", "workers", "horizon", "samples"}
    unknown = set(spec) - known
    if unknown:
        raise InputError(f"unknown batch spec keys: {sorted(unknown)}")
    if "seeds" in spec:
        seeds = [int(s) for s in spec["seeds"]]
    else:
        base = int(spec.get("base_seed", args.seed))
        seeds = [base + i for i in range(int(spec.get("n_scenarios", 4)))]
    eps_grid = [float(e) for e in spec.get("eps_grid", [1e-4, 1e-3])]
    formulations = tuple(spec.get("formulations", ["gmm", "truncated-gmm"]))
    metrics = harness.batch_experiment(
        seeds,
        eps_grid,
        formulations,
        perturbation=float(spec.get("perturbation", 0.8)),
        conc_kind=ConcKind.parse(args.conc or "vp"),
        horizon=int(spec.get("horizon", 50)),
        workers=int(spec.get("workers", 1)),
        out_dir=args.out_dir,
    )
    n_runs = len(metrics.records)
    n_ok = sum(r.converged for r in metrics.records)
    print(f"runs={n_runs} converged={n_ok} mean_solve_ms={metrics.mean_solve_time_ms:.1f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="momentplan",
        description="Chance-constrained contouring planner and moment toolkit",
    )
    ap.add_argument("--seed", type=int, default=0, help="base random seed")
    ap.add_argument("--out-dir", default="out", help="output directory")
    ap.add_argument("--conc", default=None, help="concentration kind: cantelli|vp|gauss")
    ap.add_argument("--eps", type=float, default=None, help="per-step risk level override")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("express", help="render moment expressions for a polynomial")
    p.add_argument("spec", help="constraint spec JSON")
    p.add_argument("--dialect", choices=("plain", "c"), default="plain")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_express)

    p = sub.add_parser("moments", help="compute a moment table for a distribution")
    p.add_argument("spec", help="distribution spec JSON")
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("bound", help="evaluate a concentration bound")
    p.add_argument("--mean", type=float, default=None)
    p.add_argument("--var", type=float, default=None)
    p.add_argument("--components", default=None, help="mixture components JSON")
    p.set_defaults(func=cmd_bound, conc="vp")

    p = sub.add_parser("plan", help="solve a planning problem file")
    p.add_argument("problem", help="problem JSON")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--formulation", choices=("chance", "mean"), default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("validate", help="Monte Carlo soundness check of a plan")
    p.add_argument("result", help="result JSON from plan")
    p.add_argument("problem", help="problem JSON")
    p.add_argument("--samples", type=int, default=100_000)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("benchmark", help="batch experiment from a spec file")
    p.add_argument("spec", help="batch spec JSON")
    p.set_defaults(func=cmd_benchmark)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    # subcommand-level --conc falls back to the global flag
    if getattr(args, "conc", None) is None:
        args.conc = "vp"
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (polyalg.PolynomialError, distmoments.DistributionError,
            mpcc.PathError, planner.PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
