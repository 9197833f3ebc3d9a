"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS`` or ``FAIL`` line before asserting, so
``pytest -s tests/test_acceptance.py`` (or running this file directly) gives a
one-line-per-criterion summary.
"""
from __future__ import annotations

import filecmp
import math
import sys

import numpy as np
import pytest

from obstacle.analysis import dyadic_radii, gradient_holder, holder_exponent, oscillation_decay
from obstacle.cli import identity_check, run_scenario
from obstacle.config import BUILTINS, build_problem, parse_config
from obstacle.core import Grid, ProblemSpec, compute_exponents
from obstacle.discretize import assemble_residual
from obstacle.operators import (BellmanOperator, LinearOperator, PucciOperator, check_structure_condition,
                                pucci_extremal)
from obstacle.solvers import SolverConfig, continuation_solve, solve_complementarity, verify_solution

from oracles import pucci_rotation_oracle, rotation_resolution, unilateral_fixture

TOL = 1e-10


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {title}: {detail}")
    assert ok, detail


def _solve_all(name: str):
    cfg = parse_config(name)
    prob = build_problem(cfg)
    u_dir, r_dir = solve_complementarity(prob, cfg.solver)
    u_pen, r_pen = continuation_solve(prob, cfg.solver)
    return cfg, prob, (u_dir, r_dir), (u_pen, r_pen)


@pytest.fixture(scope="module")
def builtin_runs():
    return {name: _solve_all(name) for name in sorted(BUILTINS)}


def test_c01_exact_fixture():
    cfg = parse_config("example_1d_unilateral")
    prob = build_problem(cfg)
    u, rep = solve_complementarity(prob, cfg.solver)
    err = float(np.max(np.abs(u - unilateral_fixture(prob.grid.coords[:, 0]))))
    all_lower = rep.regime_counts == {"lower": prob.grid.interior.size, "upper": 0, "pde": 0}
    verdict(1, "exact fixture", err <= 1e-3 and all_lower,
            f"max error {err:.2e} (limit 1e-3), regimes {rep.regime_counts}")


def test_c02_unconstrained_consistency():
    cfg = parse_config("poisson_no_contact")
    prob = build_problem(cfg)
    u, _ = solve_complementarity(prob, cfg.solver)
    x = prob.grid.coords[:, 0]
    err = float(np.max(np.abs(u - (1 - x ** 2))))
    verdict(2, "poisson without contact", prob.grid.h == 2.0 ** -10 and err <= 1e-10,
            f"h = {prob.grid.h}, max error {err:.2e} (limit 1e-10)")


def test_c03_cross_solver_agreement(builtin_runs):
    gaps = {}
    for name, (cfg, _, (u_dir, _), (u_pen, r_pen)) in builtin_runs.items():
        assert cfg.solver.delta_floor == 1e-6 and r_pen.delta_path[-1]["delta"] == 1e-6
        gaps[name] = float(np.max(np.abs(u_dir - u_pen)))
    worst = max(gaps.values())
    verdict(3, "cross-solver agreement", worst <= 1e-4,
            "max |direct - penalized| " + ", ".join(f"{k}={v:.1e}" for k, v in gaps.items()))


def test_c04_sandwich_and_complementarity(builtin_runs):
    # the obstacle-problem residual is checked on the direct solutions; penalized solutions
    # solve a different equation and are checked against their own residual and the O(delta)
    # obstacle overshoot that penalization allows
    lines, ok = [], True
    for name, (cfg, prob, (u_dir, r_dir), (u_pen, r_pen)) in builtin_runs.items():
        tol = 10 * TOL
        ver = verify_solution(prob, u_dir, tol)
        res = float(np.max(np.abs(assemble_residual(prob, u_dir)[prob.grid.interior])))
        good = r_dir.converged and ver.obstacle_violation <= tol and res <= tol
        over = float(np.max(np.maximum(u_pen - prob.psi, prob.phi - u_pen)))
        pen_ok = (r_pen.converged and r_pen.final_residual <= tol
                  and over <= cfg.solver.delta_floor * max(r_pen.penalty_trace[-1], 1.0) * (1 + 1e-6))
        ok &= good and pen_ok
        lines.append(f"{name}: viol {ver.obstacle_violation:.1e} resid {res:.1e}")
    verdict(4, "sandwich and complementarity", ok, f"limit {10 * TOL:.0e}; " + "; ".join(lines))


def test_c05_penalty_trace_bounded():
    cfg = parse_config("bilateral_clip_1d")
    prob = build_problem(cfg)
    sc = SolverConfig(delta0=1e-3, delta_factor=0.1, delta_floor=1e-6)
    _, rep = continuation_solve(prob, sc)
    deltas = [d["delta"] for d in rep.delta_path]
    traces = rep.penalty_trace
    ratio = max(traces) / min(traces)
    ok = len(traces) == 4 and np.allclose(deltas, [1e-3, 1e-4, 1e-5, 1e-6], rtol=1e-12) and ratio < 2
    verdict(5, "penalty trace", ok, "traces " + ", ".join(f"{t:.4f}" for t in traces) + f", ratio {ratio:.3f}")


def test_c06_isaacs_identity():
    s = identity_check(draws=100_000, seed=0)
    ok = s["exact_mismatches"] == 0 and s["grid_max_relative_difference"] <= 1e-12
    verdict(6, "min-max identity", ok,
            f"{s['draws']} draws, {s['exact_mismatches']} mismatches, grid gap {s['grid_max_relative_difference']:.1e}")


def test_c07_pucci_correctness():
    rng = np.random.default_rng(2024)
    n = 1000
    M = rng.normal(size=(n, 2, 2)) * rng.choice([0.1, 1.0, 10.0], size=(n, 1, 1))
    M = (M + np.swapaxes(M, 1, 2)) / 2
    N = rng.normal(size=(n, 2, 2))
    N = N + np.swapaxes(N, 1, 2)
    lam = rng.uniform(0.2, 2.0, n)
    Lam = lam + rng.uniform(0.0, 3.0, n)
    oracle_bad = duality_bad = homog_bad = subadd_bad = 0
    for X, Y, a, b in zip(M, N, lam, Lam):
        hi, lo = pucci_rotation_oracle(X, a, b, angles=180, levels=2)
        res = rotation_resolution(X, a, b, angles=180) + 1e-12 * (1 + np.abs(X).max())
        p, m = pucci_extremal("+", X, a, b), pucci_extremal("-", X, a, b)
        oracle_bad += not (hi - res <= p <= hi + res and lo - res <= m <= lo + res)
        duality_bad += m != -pucci_extremal("+", -X, a, b)
        t = rng.uniform(0, 100)
        homog_bad += not math.isclose(pucci_extremal("+", t * X, a, b), t * p, rel_tol=1e-12,
                                      abs_tol=1e-12 * (1 + t * np.abs(X).max()) * b)
        slack = 1e-12 * (1 + np.abs(X).max() + np.abs(Y).max()) * b
        subadd_bad += pucci_extremal("+", X + Y, a, b) > p + pucci_extremal("+", Y, a, b) + slack
    ok = oracle_bad == duality_bad == homog_bad == subadd_bad == 0
    verdict(7, "pucci operators", ok, f"{n} matrices; failures oracle {oracle_bad}, duality {duality_bad}, "
            f"homogeneity {homog_bad}, subadditivity {subadd_bad}")


def test_c08_structure_condition():
    viol = {}
    for name in sorted(BUILTINS):
        prob = build_problem(parse_config(name))
        rep = check_structure_condition(prob.operator, prob.lam, prob.Lam, prob.mu, samples=10_000, seed=8)
        viol[name] = rep.max_violation
    grid = Grid.uniform((-1.0, -1.0), (1.0, 1.0), (9, 9))
    extra = {"bellman": BellmanOperator([LinearOperator(grid, 1.0), LinearOperator(grid, 2.0, b=[0.5, 0.0])]),
             "pucci_minus": PucciOperator(grid, "-", 0.5, 3.0, mu=1.0)}
    for name, op in extra.items():
        viol[name] = check_structure_condition(op, op.lam, op.Lam, op.mu, samples=10_000, seed=8).max_violation
    bad = check_structure_condition(LinearOperator(grid, 3.0), 1.0, 2.0, 0.0, samples=10_000, seed=8)
    ok = all(v <= 0 for v in viol.values()) and bad.max_violation > 0
    verdict(8, "structure condition", ok, ", ".join(f"{k}={v:.1e}" for k, v in viol.items())
            + f"; ill-posed {bad.max_violation:.2e}")


def test_c09_regularity_estimators():
    grid = Grid.uniform((-1.0,), (1.0,), (1025,))
    fit = holder_exponent(grid, np.sqrt(np.abs(grid.coords[:, 0])))
    cfg = parse_config("example_1d_unilateral")
    prob = build_problem(cfg)
    u, rep = solve_complementarity(prob, cfg.solver)
    gh = gradient_holder(prob.grid, u, rep.partition, 0.05, prob.phi, prob.psi)
    limit = 10 * prob.grid.h ** 0.5
    ok = (abs(fit.exponent - 0.5) <= 0.05 and abs(gh.exponent - 0.5) <= 0.1
          and gh.contact_mismatch <= limit)
    verdict(9, "regularity estimators", ok, f"holder {fit.exponent:.4f}, gradient holder {gh.exponent:.4f}, "
            f"contact mismatch {gh.contact_mismatch:.1e} (limit {limit:.1e})")


def test_c10_oscillation_decay():
    grid = Grid.uniform((-1.0,), (1.0,), (1025,))
    u = np.sqrt(np.abs(grid.coords[:, 0]))
    radii = sorted(dyadic_radii(grid, 0.0), reverse=True)[:3]
    tr = oscillation_decay(grid, u, 0.0, 0.0, radii, compute_exponents(1, 2, 2, 0.5))
    target = 2 ** -0.5
    ok = len(tr.theta) == 3 and all(t is not None and abs(t - target) <= 0.05 * target for t in tr.theta)
    verdict(10, "oscillation decay", ok, "theta " + ", ".join(f"{t:.4f}" for t in tr.theta)
            + f" (target {target:.4f})")


def _monotonicity_problems():
    probs = [build_problem(parse_config(n).with_nodes([33] * parse_config(n).grid.dim)) for n in sorted(BUILTINS)]
    grid = Grid.uniform((-1.0, -1.0), (1.0, 1.0), (17, 17))
    x = grid.coords
    ex = compute_exponents(2, 4, 4, 0.5)
    ops = [LinearOperator(grid, [[2.0, 0.5], [0.5, 1.0]], b=np.stack([np.sin(3 * x[:, 0]), x[:, 1]], -1)),
           BellmanOperator([LinearOperator(grid, 1.0, b=[1.0, 0.0]), LinearOperator(grid, [[2.0, -0.3], [-0.3, 1.5]])]),
           PucciOperator(grid, "-", 0.5, 3.0, mu=1.0)]
    probs += [ProblemSpec(grid, op, np.sin(x[:, 0]), -1.0, 1.0, 0.0, ex) for op in ops]
    return probs


def test_c11_scheme_monotonicity():
    rng = np.random.default_rng(11)
    probs = _monotonicity_problems()
    bad = 0
    for _ in range(1000):
        prob = probs[rng.integers(len(probs))]
        grid = prob.grid
        u = rng.uniform(-1.5, 1.5, grid.size) * rng.choice([1e-2, 1.0])
        base = assemble_residual(prob, u)
        node = int(rng.integers(grid.size))
        v = u.copy()
        v[node] += rng.exponential() * rng.choice([1e-3, 1.0])
        after = assemble_residual(prob, v)
        rows = np.setdiff1d(grid.interior, [node])
        slack = 1e-12 * (1 + np.abs(v).max()) / grid.h ** 2
        bad += bool(np.any(after[rows] > base[rows] + slack))
    verdict(11, "scheme monotonicity", bad == 0, f"1000 perturbations, {bad} raised a neighbouring residual")


def test_c12_determinism(tmp_path):
    mismatched = []
    for name, command in (("bilateral_clip_1d", "analyze"), ("pucci_2d_bilateral", "solve"),
                          ("rough_f_1d", "sweep-delta")):
        cfg = parse_config(name)
        a = run_scenario(cfg, command, out=str(tmp_path / name / "a"))
        b = run_scenario(cfg, command, out=str(tmp_path / name / "b"))
        for x, y in ((a.solution, b.solution), (a.report, b.report), (a.table, b.table)):
            if x is not None and not filecmp.cmp(x, y, shallow=False):
                mismatched.append(x)
    verdict(12, "determinism", not mismatched, f"differing files: {mismatched or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
