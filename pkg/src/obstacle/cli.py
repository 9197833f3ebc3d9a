"""Command-line runner: solve, verify, analyze, sweeps and the min-max identity check.

Usage::

    obstacle solve --config bilateral_clip_1d --solver both --out runs/clip
    obstacle sweep-h --config poisson_no_contact
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import __version__
from .analysis import (REGIME_NAMES, Regime, coincidence_sets, default_contact_tol, dyadic_radii,
                       gradient_holder, holder_exponent, oscillation_decay)
from .config import ConfigError, ScenarioConfig, build_problem, config_hash, exact_solution, load_config
from .core import Grid, ProblemSpec
from .operators import check_structure_condition, isaacs_grid_value, minmax_reduction
from .solvers import SolverError, continuation_solve, mollified_problem, solve_complementarity, verify_solution

log = logging.getLogger("obstacle")

COMMANDS = ("solve", "verify", "analyze", "sweep-h", "sweep-delta", "identity-test")
EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NONCONVERGENCE = 0, 1, 2, 3

AGREEMENT_TOL = 1e-4
IDENTITY_DRAWS = 100_000


@dataclass
class RunArtifacts:
    """Paths of the written files plus the in-memory report and exit status."""

    solution: Optional[str]
    report: str
    table: str
    exit_code: int
    data: dict = field(default_factory=dict, repr=False)
    failures: list = field(default_factory=list)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def header_line(config: ScenarioConfig) -> str:
    return f"obstacle {__version__} config={config_hash(config)}"


# ---------------------------------------------------------------------------
# file formats


def write_solution(path: str, config: ScenarioConfig, problem: ProblemSpec, u, labels) -> None:
    grid = problem.grid
    cols = [f"x{k + 1}" for k in range(grid.dim)] + ["u", "phi", "psi", "f", "regime"]
    buf = io.StringIO()
    buf.write(f"# {header_line(config)}\n")
    buf.write(",".join(cols) + "\n")
    for i in range(grid.size):
        nums = list(grid.coords[i]) + [u[i], problem.phi[i], problem.psi[i], problem.f[i]]
        buf.write(",".join("%.17g" % v for v in nums) + "," + REGIME_NAMES[Regime(labels[i])] + "\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_solution(path: str) -> dict:
    """Columns of a solution file as arrays (``regime`` stays a list of names); ``header`` holds the first line."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()[2:].strip()
        rows = list(csv.reader(fh))
    cols = rows[0]
    out = {"header": header}
    for k, name in enumerate(cols):
        vals = [r[k] for r in rows[1:]]
        out[name] = vals if name == "regime" else np.array(vals, dtype=float)
    return out


def write_report(path: str, config: ScenarioConfig, data: dict) -> None:
    payload = {"header": header_line(config)}
    payload.update(data)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(payload), fh, indent=1)
        fh.write("\n")


def read_report(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_table(path: str, config: ScenarioConfig, columns: list, rows: list) -> None:
    buf = io.StringIO()
    buf.write(f"# {header_line(config)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if v is None else ("%.17g" % v if isinstance(v, (float, np.floating)) else v)
                    for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


# ---------------------------------------------------------------------------
# pieces of a run


def _solve(config: ScenarioConfig, problem: ProblemSpec, solver: str):
    """Run the selected solvers; returns ``{method: (u, report)}`` and the first failure if any."""
    results, failure = {}, None
    runners = {"direct": solve_complementarity, "penalized": continuation_solve}
    chosen = ("direct", "penalized") if solver == "both" else (solver,)
    for method in chosen:
        try:
            results[method] = runners[method](problem, config.solver)
        except SolverError as err:
            failure = failure or f"{method}: {err}"
            results[method] = (None, err.report)
    return results, failure


def _regularity(config: ScenarioConfig, problem: ProblemSpec, u, partition) -> tuple[dict, list]:
    grid = problem.grid
    fit_u = holder_exponent(grid, u)
    eps = 2 * grid.h
    try:
        gh = gradient_holder(grid, u, partition, eps, problem.phi, problem.psi)
        du_exp, mismatch = gh.exponent, gh.contact_mismatch
    except ValueError:
        du_exp, mismatch = math.nan, None
    center = tuple((np.asarray(grid.lower) + grid.upper) / 2)
    radii = dyadic_radii(grid, center)
    osc = []
    if radii:
        trace = oscillation_decay(grid, u, problem.f, center, radii, problem.exponents)
        osc = trace.rows()
    holder = {"u_exponent": fit_u.exponent, "du_exponent": du_exp, "contact_gradient_mismatch": mismatch}
    return holder, osc


def _solve_command(config: ScenarioConfig, problem: ProblemSpec, solver: str, out: str) -> RunArtifacts:
    results, failure = _solve(config, problem, solver)
    failures = []
    tol = config.solver.tolerance
    data: dict = {"scenario": config.name, "command": "solve", "solvers": list(results)}
    primary = "direct" if "direct" in results else "penalized"
    u, rep = results[primary]
    pen = results.get("penalized", (None, None))
    data["residual_history"] = rep.residual_history
    data["delta_path"] = pen[1].delta_path if pen[1] is not None else []
    data["penalty_trace"] = pen[1].penalty_trace if pen[1] is not None else []
    data["regime_counts"] = rep.regime_counts
    data["roundoff_floor"] = rep.roundoff_floor
    data["frozen_nodes"] = rep.frozen_nodes
    data["message"] = rep.message

    per_solver = {}
    target = mollified_problem(problem, config.solver.epsilon)
    for method, (v, r) in results.items():
        entry = {"converged": r.converged, "iterations": r.iterations, "final_residual": r.final_residual}
        if v is not None:
            if method == "direct":
                vtol = 10 * max(tol, r.roundoff_floor)
            else:
                # penalized solutions sit O(delta * trace) outside the obstacles by construction
                vtol = 10 * tol + config.solver.delta_floor * max(r.penalty_trace[-1], 1.0) * (1 + 1e-6)
            ver = verify_solution(target, v, vtol)
            entry.update(constraint_violation_max=ver.obstacle_violation, complementarity_max=ver.residual_max,
                         subsolution_violation=ver.subsolution_violation,
                         supersolution_violation=ver.supersolution_violation, verify_tol=vtol,
                         verified=ver.passed)
            if not ver.passed:
                failures.append(f"{method}: verification failed at tolerance {vtol:.3e}")
            exact = exact_solution(config)
            if exact is not None:
                entry["exact_error"] = float(np.max(np.abs(v - exact)))
        per_solver[method] = entry
    data["per_solver"] = per_solver
    data["constraint_violation_max"] = per_solver[primary].get("constraint_violation_max")
    data["complementarity_max"] = per_solver[primary].get("complementarity_max")

    if all(v is not None for v, _ in results.values()) and len(results) == 2:
        gap = float(np.max(np.abs(results["direct"][0] - results["penalized"][0])))
        bound = max(AGREEMENT_TOL, 2 * config.solver.delta_floor * max(results["penalized"][1].penalty_trace[-1], 1))
        data["solver_agreement"] = {"max_difference": gap, "bound": bound}
        if gap > bound:
            failures.append(f"solvers disagree by {gap:.3e} > {bound:.3e}")

    sr = check_structure_condition(problem.operator, problem.lam, problem.Lam, problem.mu,
                                   samples=1000, seed=config.seed)
    data["structure_violation"] = sr.max_violation
    if not sr.passed:
        failures.append(f"structure condition violated by {sr.max_violation:.3e}")

    sol_path = None
    if u is not None:
        part = rep.partition or coincidence_sets(problem.grid, u, target.phi, target.psi,
                                                 default_contact_tol(problem.grid, tol))
        data["holder"], data["oscillation"] = _regularity(config, target, u, part)
        sol_path = os.path.join(out, "solution.csv")
        write_solution(sol_path, config, target, u, part.labels)
    else:
        data["holder"], data["oscillation"] = {"u_exponent": None, "du_exponent": None}, []
    data["failures"] = failures + ([failure] if failure else [])
    code = EXIT_NONCONVERGENCE if failure else (EXIT_INVARIANT if failures else EXIT_OK)
    data["exit_code"] = code
    report_path = os.path.join(out, "report.json")
    write_report(report_path, config, data)
    table_path = os.path.join(out, "analysis.csv")
    rows = [(m, k, v) for m, e in per_solver.items() for k, v in e.items() if not isinstance(v, (dict, list))]
    write_table(table_path, config, ["solver", "quantity", "value"], rows)
    return RunArtifacts(sol_path, report_path, table_path, code, data, data["failures"])


def _analyze_command(config, problem, solver, out) -> RunArtifacts:
    art = _solve_command(config, problem, "direct" if solver == "both" else solver, out)
    if art.solution is None:
        return art
    target = mollified_problem(problem, config.solver.epsilon)
    grid = problem.grid
    u = read_solution(art.solution)["u"]
    part = coincidence_sets(grid, u, target.phi, target.psi, default_contact_tol(grid, config.solver.tolerance))
    rows = []
    for name, count in part.counts().items():
        rows.append(("regime", name, "count", count))
    for r in dyadic_radii(grid, tuple((np.asarray(grid.lower) + grid.upper) / 2))[:4]:
        rows.append(("noncoincidence_interior", "", f"r={r!r}", int(part.noncoincidence_interior(r).sum())))
    for row in art.data["oscillation"]:
        rows.append(("oscillation", f"r={row['r']!r}", "omega", row["omega"]))
        rows.append(("oscillation", f"r={row['r']!r}", "theta", row["theta"]))
    fit = holder_exponent(grid, u)
    for d, s in zip(fit.distances, fit.sups):
        rows.append(("holder_bins", f"d={d!r}", "sup_difference", s))
    rows.append(("holder", "u", "exponent", fit.exponent))
    rows.append(("holder", "u", "seminorm", fit.seminorm))
    rows.append(("holder", "Du", "exponent", art.data["holder"]["du_exponent"]))
    write_table(art.table, config, ["table", "key", "quantity", "value"], rows)
    return art


def _sweep_h(config, problem, solver, out) -> RunArtifacts:
    """Errors against the closed form (or the finest grid) at h, h/2, h/4 with observed orders."""
    method = "direct" if solver == "both" else solver
    runner = solve_complementarity if method == "direct" else continuation_solve
    levels = []
    failures = []
    code = EXIT_OK
    for k in range(3):
        cfg = config.with_nodes([(n - 1) * 2 ** k + 1 for n in config.grid.nodes])
        prob = build_problem(cfg)
        try:
            u, rep = runner(prob, cfg.solver)
        except SolverError as err:
            failures.append(f"h/{2 ** k}: {err}")
            code = EXIT_NONCONVERGENCE
            break
        levels.append((cfg, prob.grid, u, exact_solution(cfg)))
    rows = []
    if levels:
        has_exact = levels[0][3] is not None
        fine_cfg, fine_grid, fine_u, _ = levels[-1]
        errors = []
        for k, (cfg, grid, u, exact) in enumerate(levels):
            if has_exact:
                err = float(np.max(np.abs(u - exact)))
            else:
                stride = 2 ** (len(levels) - 1 - k)
                ref = fine_u.reshape(fine_grid.shape)[tuple(slice(None, None, stride) for _ in grid.shape)]
                err = float(np.max(np.abs(u - ref.reshape(-1)))) if k < len(levels) - 1 else 0.0
            errors.append(err)
        scale = max(1.0, float(np.max(np.abs(levels[0][2]))))
        for k, (cfg, grid, u, _) in enumerate(levels):
            order, flag = None, ""
            # rounding in the solve grows like eps * (nodes per axis)^2
            if has_exact and errors[k] <= np.finfo(float).eps * scale * max(grid.shape) ** 2:
                flag = "exact"
            if k > 0 and errors[k] > 0 and errors[k - 1] > 0 and not flag:
                order = math.log2(errors[k - 1] / errors[k])
            rows.append((grid.h, errors[k], order, flag))
    reference = "closed form" if levels and levels[0][3] is not None else "finest grid"
    data = {"scenario": config.name, "command": "sweep-h", "reference": reference, "levels": [dict(h=r[0], error=r[1], order=r[2], flag=r[3]) for r in rows],
            "failures": failures, "exit_code": code}
    report = os.path.join(out, "report.json")
    table = os.path.join(out, "analysis.csv")
    write_report(report, config, data)
    write_table(table, config, ["h", "error", "observed_order", "flag"], rows)
    return RunArtifacts(None, report, table, code, data, failures)


def _sweep_delta(config, problem, solver, out) -> RunArtifacts:
    failures, code = [], EXIT_OK
    try:
        _, rep = continuation_solve(problem, config.solver)
    except SolverError as err:
        rep = err.report
        failures.append(str(err))
        code = EXIT_NONCONVERGENCE
    rows = [(d["delta"], d["iterations"], d["residual"], d.get("tail"), d.get("penalty")) for d in rep.delta_path]
    data = {"scenario": config.name, "command": "sweep-delta", "delta_path": rep.delta_path,
            "penalty_trace": rep.penalty_trace, "tail_message": rep.message, "failures": failures,
            "exit_code": code}
    report = os.path.join(out, "report.json")
    table = os.path.join(out, "analysis.csv")
    write_report(report, config, data)
    write_table(table, config, ["delta", "newton_iterations", "residual", "cauchy_tail", "penalty_trace"], rows)
    return RunArtifacts(None, report, table, code, data, failures)


def identity_check(draws: int = IDENTITY_DRAWS, seed: int = 0, chunk: int = 10_000) -> dict:
    """Compare the min-max reduction with ``min(max(A, B), C)`` and with the switch-grid brute force."""
    rng = np.random.default_rng(seed)
    exact_mismatch = 0
    worst_grid = 0.0
    for start in range(0, draws, chunk):
        m = min(chunk, draws - start)
        A, B, C = rng.normal(size=(3, m)) * rng.choice([1e-3, 1.0, 1e3], size=(3, m))
        # planted ties exercise the tie rule
        tie = rng.random(m) < 0.05
        B[tie] = A[tie]
        res = minmax_reduction(A, B, C)
        exact_mismatch += int(np.sum(res.value != np.minimum(np.maximum(A, B), C)))
        grid_val = isaacs_grid_value(A, B, C)
        scale = np.maximum(1.0, np.max(np.abs([A, B, C]), axis=0))
        worst_grid = max(worst_grid, float(np.max(np.abs(grid_val - res.value) / scale)))
    return {"draws": draws, "exact_mismatches": exact_mismatch, "grid_max_relative_difference": worst_grid}


def _identity_command(config, problem, solver, out) -> RunArtifacts:
    summary = identity_check(seed=config.seed)
    failures = []
    if summary["exact_mismatches"]:
        failures.append(f"{summary['exact_mismatches']} mismatches against min(max(A, B), C)")
    if summary["grid_max_relative_difference"] > 1e-12:
        failures.append("grid oracle differs by more than 1e-12")
    code = EXIT_INVARIANT if failures else EXIT_OK
    data = {"command": "identity-test", **summary, "failures": failures, "exit_code": code}
    report = os.path.join(out, "report.json")
    table = os.path.join(out, "analysis.csv")
    write_report(report, config, data)
    write_table(table, config, ["quantity", "value"], [(k, v) for k, v in summary.items()])
    return RunArtifacts(None, report, table, code, data, failures)


_HANDLERS = {"solve": _solve_command, "verify": _solve_command, "analyze": _analyze_command,
             "sweep-h": _sweep_h, "sweep-delta": _sweep_delta, "identity-test": _identity_command}


def run_scenario(config: ScenarioConfig, command: str, solver: str = "both", out: Optional[str] = None) -> RunArtifacts:
    """Run one command and write its artifacts into ``out`` (default: the config's output dir)."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    if solver not in ("penalized", "direct", "both"):
        raise ValueError(f"unknown solver {solver!r}")
    out = out or config.output_dir
    os.makedirs(out, exist_ok=True)
    problem = None if command == "identity-test" else build_problem(config)
    if command == "verify" and solver == "both":
        solver = "direct"
    return _HANDLERS[command](config, problem, solver, out)


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="obstacle", description="Finite-difference solver and diagnostics for bilateral obstacle problems.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="config file or built-in scenario name")
    p.add_argument("--solver", choices=("penalized", "direct", "both"), default="both")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config [output] dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        art = run_scenario(config, args.command, args.solver, args.out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    for msg in art.failures:
        print(msg, file=sys.stderr)
    print(f"{args.command}: exit {art.exit_code}; report {art.report}")
    return art.exit_code


if __name__ == "__main__":
    sys.exit(main())
