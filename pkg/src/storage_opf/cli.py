"""Command-line front end: solve bundled or user cases, compare the relaxed
model against the mode branch-and-bound, and sweep fee/cost scenarios.

Exit codes: 0 success, 1 usage or case-file problems, 2 solver breakdowns.
All CSV output is deterministic under --serial; anything time-dependent
(wall clocks, timestamps) lives in '#' comment lines so the bodies of two
identical invocations compare byte-for-byte.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import itertools
import json
import os
import sys
import time
from importlib import resources

import numpy as np

from .bnb import BnbOptions, BnbStatus, solve_mip
from .conditions import CONDITION_NAMES, build_report, report_to_csv
from .formulation import build_relaxed
from .ipm import DualRecord, SolutionPoint, SolveStatus, SolverOptions, solve
from .network import (CaseError, NetworkCase, load_case, with_rg_cost,
                      with_storage_fees)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SOLVER = 2

DEFAULT_SCENARIO_CAP = 64


def _fail(msg: str, code: int) -> int:
    print(f"storage-opf: {msg}", file=sys.stderr)
    return code


def _resolve_case_path(arg: str) -> str:
    """A real path wins; otherwise try the bundled case directory."""
    if os.path.exists(arg):
        return arg
    name = arg[:-5] if arg.endswith(".json") else arg
    bundle = resources.files("storage_opf") / "cases" / f"{name}.json"
    if bundle.is_file():
        return str(bundle)
    return arg  # let load_case produce the error message


def _case_stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _solver_options(args) -> SolverOptions:
    fields = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CaseError(f"cannot read config {args.config}: {exc}")
        if not isinstance(doc, dict):
            raise CaseError(f"config {args.config}: top level must be an object")
        known = {f.name for f in dataclasses.fields(SolverOptions)}
        for key, val in doc.items():
            if key not in known:
                raise CaseError(f"config {args.config}: unknown solver option "
                                f"{key!r}")
            fields[key] = val
    if getattr(args, "tol", None) is not None:
        fields["kkt_tolerance"] = args.tol
    try:
        return SolverOptions(**fields)
    except (TypeError, ValueError) as exc:
        raise CaseError(f"bad solver options: {exc}")


def _bnb_options(args, solver: SolverOptions) -> BnbOptions:
    opts = BnbOptions(solver=solver)
    if getattr(args, "gap", None) is not None:
        opts.gap_tolerance = args.gap
    return opts


def _header_comment(case_path: str, extra: dict | None = None) -> list[str]:
    lines = [f"# storage-opf case={os.path.basename(case_path)}",
             f"# generated {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}"]
    for key, val in (extra or {}).items():
        lines.append(f"# {key}={val}")
    return lines


def _solution_document(case: NetworkCase, result, model: str) -> dict:
    doc = {
        "case": case.name,
        "model": model,
        "status": result.status.value,
        "objective": result.objective,
        "iterations": result.iterations,
        "mu_final": result.mu_final,
        "message": result.message,
    }
    if result.residuals is not None:
        doc["residuals"] = dataclasses.asdict(result.residuals)
    if result.solution is not None:
        doc["x"] = result.solution.x.tolist()
        doc["scd_max"] = float(result.solution.scd().max()
                               if result.solution.scd().size else 0.0)
    if result.nu is not None:
        doc["nu"] = np.asarray(result.nu).tolist()
    if result.lam is not None:
        doc["lam"] = np.asarray(result.lam).tolist()
    if result.duals is not None:
        k = 1.0 / (case.base_mva * case.time_grid.interval_hours)
        doc["lmp_per_mwh"] = (result.duals.lmp() * k).tolist()
    return doc


def _duals_csv(problem, nu: np.ndarray, lam: np.ndarray) -> str:
    lines = ["constraint,kind,entity,period,side,multiplier"]
    for handles, vals in ((problem.eq_handles, nu),
                          (problem.ineq_handles, lam)):
        for h, v in zip(handles, vals):
            lines.append(f"{h},{h.kind.value},{h.entity},"
                         f"{'' if h.period is None else h.period},"
                         f"{h.side or ''},{v:.12g}")
    return "\n".join(lines) + "\n"


def _write(path: str, text: str):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_solve_relaxed(args) -> int:
    try:
        case = load_case(_resolve_case_path(args.case))
        solver = _solver_options(args)
    except CaseError as exc:
        return _fail(str(exc), EXIT_USAGE)
    problem = build_relaxed(case)
    t0 = time.perf_counter()
    result = solve(problem, solver)
    wall = time.perf_counter() - t0

    os.makedirs(args.out, exist_ok=True)
    stem = _case_stem(args.case)
    doc = _solution_document(case, result, "relaxed")
    _write(os.path.join(args.out, f"{stem}_solution.json"),
           json.dumps(doc, indent=2) + "\n")

    if result.status is not SolveStatus.OPTIMAL:
        print(f"{case.name or stem}: {result.status.value} "
              f"({result.message})", file=sys.stderr)
        return EXIT_SOLVER

    _write(os.path.join(args.out, f"{stem}_duals.csv"),
           _duals_csv(problem, result.nu, result.lam))
    report = build_report(case, result.solution, result.duals)
    head = _header_comment(args.case, {"wall_s": f"{wall:.3f}"})
    _write(os.path.join(args.out, f"{stem}_conditions.csv"),
           "\n".join(head) + "\n" + report_to_csv(report))

    summary = report.summary()
    print(f"{case.name or stem}: optimal objective {result.objective:.4f} "
          f"in {result.iterations} iterations, scd_max "
          f"{summary['scd_max']:.3e}")
    for name in CONDITION_NAMES:
        print(f"  {name}: {summary['conditions'][name]}")
    return EXIT_OK


def cmd_solve_mip(args) -> int:
    try:
        case = load_case(_resolve_case_path(args.case))
        solver = _solver_options(args)
    except CaseError as exc:
        return _fail(str(exc), EXIT_USAGE)
    opts = _bnb_options(args, solver)
    t0 = time.perf_counter()
    result = solve_mip(case, opts)
    wall = time.perf_counter() - t0

    os.makedirs(args.out, exist_ok=True)
    stem = _case_stem(args.case)
    doc = {
        "case": case.name,
        "model": "mip",
        "status": result.status.value,
        "objective": result.objective,
        "nodes_explored": result.nodes_explored,
        "gap": result.gap,
        "failed_nodes": result.failed_nodes,
        "infeasible_nodes": result.infeasible_nodes,
        "bound_violations": result.bound_violations,
        "message": result.message,
    }
    if result.solution is not None:
        doc["x"] = result.solution.x.tolist()
        doc["scd_max"] = float(result.solution.scd().max()
                               if result.solution.scd().size else 0.0)
    _write(os.path.join(args.out, f"{stem}_mip_solution.json"),
           json.dumps(doc, indent=2) + "\n")

    if result.status is not BnbStatus.OPTIMAL:
        print(f"{case.name or stem}: {result.status.value} "
              f"({result.message})", file=sys.stderr)
        return EXIT_SOLVER
    print(f"{case.name or stem}: mip objective {result.objective:.4f}, "
          f"{result.nodes_explored} nodes, gap {result.gap:.3e}, "
          f"wall {wall:.3f}s")
    return EXIT_OK


def cmd_check_conditions(args) -> int:
    try:
        case = load_case(_resolve_case_path(args.case))
        solver = _solver_options(args)
    except CaseError as exc:
        return _fail(str(exc), EXIT_USAGE)
    problem = build_relaxed(case)

    if args.solution:
        try:
            with open(args.solution) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            return _fail(f"cannot read solution file {args.solution}: {exc}",
                         EXIT_USAGE)
        if doc.get("model") != "relaxed":
            return _fail("condition checks need a relaxed-model solution "
                         "document", EXIT_USAGE)
        needed = ("x", "nu", "lam")
        if any(key not in doc for key in needed):
            return _fail("solution document lacks x/nu/lam vectors",
                         EXIT_USAGE)
        x = np.asarray(doc["x"], dtype=float)
        nu = np.asarray(doc["nu"], dtype=float)
        lam = np.asarray(doc["lam"], dtype=float)
        if (len(x) != problem.n_vars or len(nu) != problem.n_eq
                or len(lam) != problem.n_ineq):
            return _fail("solution document does not match this case's "
                         "dimensions", EXIT_USAGE)
        solution = SolutionPoint.from_vector(problem, x)
        duals = DualRecord(problem, nu, lam)
        converged = doc.get("status") == "optimal"
    else:
        result = solve(problem, solver)
        if result.status is not SolveStatus.OPTIMAL:
            print(f"{case.name}: {result.status.value} ({result.message})",
                  file=sys.stderr)
            return EXIT_SOLVER
        solution, duals, converged = result.solution, result.duals, True

    report = build_report(case, solution, duals, converged=converged)
    os.makedirs(args.out, exist_ok=True)
    stem = _case_stem(args.case)
    _write(os.path.join(args.out, f"{stem}_conditions.csv"),
           "\n".join(_header_comment(args.case)) + "\n" + report_to_csv(report))
    summary = report.summary()
    print(json.dumps(summary, indent=2))
    return EXIT_OK if converged else EXIT_SOLVER


COMPARE_COLUMNS = (["relaxed_objective", "mip_objective", "rel_gap",
                    "relaxed_scd_max"] + list(CONDITION_NAMES)
                   + ["nodes", "exact", "status"])


def _compare_row(case: NetworkCase, solver: SolverOptions,
                 bnb: BnbOptions) -> tuple[dict, dict, object]:
    """One relaxed-vs-mip record, the wall times, and the relaxed solve."""
    row = {c: "" for c in COMPARE_COLUMNS}
    t0 = time.perf_counter()
    relaxed = solve(build_relaxed(case), solver)
    t1 = time.perf_counter()
    walls = {"relaxed_wall_s": f"{t1 - t0:.3f}"}
    if relaxed.status is not SolveStatus.OPTIMAL:
        row["status"] = f"relaxed_{relaxed.status.value}"
        return row, walls, relaxed
    report = build_report(case, relaxed.solution, relaxed.duals)
    summary = report.summary()
    scd_max = summary["scd_max"]

    t1 = time.perf_counter()
    mip = solve_mip(case, bnb)
    walls["mip_wall_s"] = f"{time.perf_counter() - t1:.3f}"
    if mip.status is not BnbStatus.OPTIMAL:
        row["status"] = f"mip_{mip.status.value}"
        return row, walls, relaxed

    rel_gap = abs(mip.objective - relaxed.objective) / max(
        1.0, abs(relaxed.objective))
    row.update({
        "relaxed_objective": f"{relaxed.objective:.6f}",
        "mip_objective": f"{mip.objective:.6f}",
        "rel_gap": f"{rel_gap:.3e}",
        "relaxed_scd_max": f"{scd_max:.3e}",
        "nodes": str(mip.nodes_explored),
        "exact": str(rel_gap <= 1e-5 and scd_max <= 1e-8).lower(),
        "status": "ok",
    })
    for name in CONDITION_NAMES:
        row[name] = summary["conditions"][name]
    return row, walls, relaxed


def cmd_compare(args) -> int:
    try:
        case = load_case(_resolve_case_path(args.case))
        solver = _solver_options(args)
    except CaseError as exc:
        return _fail(str(exc), EXIT_USAGE)
    row, walls, _ = _compare_row(case, solver, _bnb_options(args, solver))

    os.makedirs(args.out, exist_ok=True)
    head = _header_comment(args.case, walls)
    body = (",".join(COMPARE_COLUMNS) + "\n"
            + ",".join(row[c] for c in COMPARE_COLUMNS) + "\n")
    _write(os.path.join(args.out, f"{_case_stem(args.case)}_compare.csv"),
           "\n".join(head) + "\n" + body)
    print(body, end="")
    return EXIT_OK if row["status"] == "ok" else EXIT_SOLVER


def _load_sweep_spec(path: str, cap_override: int | None):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CaseError(f"cannot read sweep spec {path}: {exc}")
    if not isinstance(doc, dict):
        raise CaseError(f"sweep spec {path}: top level must be an object")
    axes = {}
    for key in ("charge_fee", "discharge_fee", "rg_cost"):
        if key in doc:
            vals = doc[key]
            if not isinstance(vals, list) or not vals:
                raise CaseError(f"sweep spec: axis {key} must be a nonempty "
                                f"list")
            axes[key] = [float(v) for v in vals]
    if not axes:
        raise CaseError("sweep spec: no axes given (need at least one of "
                        "charge_fee, discharge_fee, rg_cost)")
    selector = doc.get("storages", "all")
    if selector != "all":
        if (not isinstance(selector, list)
                or not all(isinstance(i, int) for i in selector)):
            raise CaseError("sweep spec: storages must be \"all\" or a list "
                            "of storage positions")
        selector = set(selector)
    cap = cap_override if cap_override is not None else int(
        doc.get("max_scenarios", DEFAULT_SCENARIO_CAP))
    names = sorted(axes)
    scenarios = [dict(zip(names, combo))
                 for combo in itertools.product(*(axes[k] for k in names))]
    if len(scenarios) > cap:
        raise CaseError(f"sweep has {len(scenarios)} scenarios, above the "
                        f"cap of {cap}; raise max_scenarios to allow this")
    return scenarios, selector


def _apply_overrides(case: NetworkCase, scenario: dict, selector):
    only = None if selector == "all" else selector
    out = with_storage_fees(case,
                            charge_per_mwh=scenario.get("charge_fee"),
                            discharge_per_mwh=scenario.get("discharge_fee"),
                            only=only)
    if "rg_cost" in scenario:
        out = with_rg_cost(out, scenario["rg_cost"])
    return out


def _sweep_point(case: NetworkCase, scenario: dict, selector,
                 solver: SolverOptions, bnb: BnbOptions) -> dict:
    sub = _apply_overrides(case, scenario, selector)
    row, _, relaxed = _compare_row(sub, solver, bnb)
    if relaxed.duals is not None:
        k = 1.0 / (sub.base_mva * sub.time_grid.interval_hours)
        row["min_lmp"] = f"{float(np.min(relaxed.duals.lmp() * k)):.6f}"
    else:
        row["min_lmp"] = ""
    for key, val in scenario.items():
        row[key] = f"{val:g}"
    return row


def cmd_sweep(args) -> int:
    try:
        case = load_case(_resolve_case_path(args.case))
        solver = _solver_options(args)
        scenarios, selector = _load_sweep_spec(args.spec, args.max_scenarios)
    except CaseError as exc:
        return _fail(str(exc), EXIT_USAGE)
    bnb = _bnb_options(args, solver)

    columns = sorted(scenarios[0]) + COMPARE_COLUMNS + ["min_lmp"]
    t0 = time.perf_counter()
    if args.serial or len(scenarios) == 1:
        rows = [_sweep_point(case, sc, selector, solver, bnb)
                for sc in scenarios]
    else:
        with concurrent.futures.ProcessPoolExecutor() as pool:
            futs = [pool.submit(_sweep_point, case, sc, selector, solver, bnb)
                    for sc in scenarios]
            rows = [f.result() for f in futs]
    wall = time.perf_counter() - t0

    os.makedirs(args.out, exist_ok=True)
    head = _header_comment(args.case, {"scenarios": len(scenarios),
                                       "wall_s": f"{wall:.3f}"})
    body = [",".join(columns)]
    body += [",".join(r[c] for c in columns) for r in rows]
    text = "\n".join(head) + "\n" + "\n".join(body) + "\n"
    _write(os.path.join(args.out, f"{_case_stem(args.case)}_sweep.csv"), text)
    print("\n".join(body))
    bad = sum(r["status"] != "ok" for r in rows)
    if bad:
        print(f"{bad} of {len(rows)} scenarios failed", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _add_common(p, gap=False, solution=False, spec=False):
    p.add_argument("case", help="case file path or bundled case name")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--tol", type=float, default=None,
                   help="first-order tolerance")
    p.add_argument("--config", default=None,
                   help="JSON file of solver option overrides")
    p.add_argument("--serial", action="store_true",
                   help="run everything sequentially")
    if gap:
        p.add_argument("--gap", type=float, default=None,
                       help="branch-and-bound relative gap")
    if solution:
        p.add_argument("--solution", default=None,
                       help="reuse a saved relaxed solution document")
    if spec:
        p.add_argument("--spec", required=True, help="sweep spec JSON file")
        p.add_argument("--max-scenarios", type=int, default=None,
                       help="raise the scenario cap")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="storage-opf",
        description="Multi-period AC OPF with storage: relaxed solves, "
                    "mode branch-and-bound, and exactness certificates.")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser(
        "solve-relaxed", help="solve the relaxed model, write solution, "
                              "duals, and condition report"))
    _add_common(sub.add_parser(
        "solve-mip", help="solve the exact model by branch-and-bound"),
        gap=True)
    _add_common(sub.add_parser(
        "check-conditions", help="evaluate exactness conditions at a solve "
                                 "or a saved solution"), solution=True)
    _add_common(sub.add_parser(
        "compare", help="relaxed vs branch-and-bound, one record"), gap=True)
    _add_common(sub.add_parser(
        "sweep", help="compare across a grid of fee/cost overrides"),
        gap=True, spec=True)

    args = parser.parse_args(argv)
    handlers = {
        "solve-relaxed": cmd_solve_relaxed,
        "solve-mip": cmd_solve_mip,
        "check-conditions": cmd_check_conditions,
        "compare": cmd_compare,
        "sweep": cmd_sweep,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
