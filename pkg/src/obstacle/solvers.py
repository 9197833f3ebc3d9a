"""Penalized Newton with delta-continuation, and policy iteration on the complementarity form."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .analysis import RegimePartition, coincidence_sets, default_contact_tol
from .core import ProblemSpec, as_field
from .discretize import DiscreteOperator, assemble_residual, mollify, obstacle_components, shift_obstacles
from .operators import minmax_reduction

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps

PDE, UPPER, LOWER = 0, 1, 2
TIE_BREAKS = ("pde-first", "contact-first")


@dataclass
class SolverConfig:
    """Tolerances and schedules shared by both solvers.

    ``epsilon`` is the mollification radius; 0 solves the unmollified problem.
    ``tie_break`` decides exact ties in the min-max regime choice:
    ``"pde-first"`` prefers the equation, ``"contact-first"`` the obstacle.
    """

    tolerance: float = 1e-10
    max_iterations: int = 1000
    newton_iterations: int = 50
    delta0: float = 1e-2
    delta_factor: float = 0.5
    delta_floor: float = 1e-6
    epsilon: float = 0.0
    damping: float = 1.0
    tie_break: str = "pde-first"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1 or self.newton_iterations < 1:
            raise ValueError("iteration caps must be positive")
        if not 0 < self.delta_floor <= self.delta0:
            raise ValueError("need 0 < delta_floor <= delta0")
        if not 0 < self.delta_factor < 1:
            raise ValueError("delta_factor must lie in (0, 1)")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"tie_break must be one of {TIE_BREAKS}")

    def delta_schedule(self) -> list[float]:
        """``delta0, delta0*factor, ...`` down to the floor; the floor itself is always the last entry."""
        out = [self.delta0]
        while out[-1] * self.delta_factor > self.delta_floor * (1 + 1e-12):
            out.append(out[-1] * self.delta_factor)
        if out[-1] > self.delta_floor * (1 + 1e-12):
            out.append(self.delta_floor)
        return out


@dataclass
class SolveReport:
    method: str
    converged: bool = False
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    delta_path: list = field(default_factory=list)
    penalty_trace: list = field(default_factory=list)
    regime_counts: dict = field(default_factory=dict)
    final_residual: float = float("nan")
    roundoff_floor: float = 0.0
    frozen_nodes: int = 0
    message: str = ""
    partition: Optional[RegimePartition] = field(default=None, repr=False, compare=False)
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        """Serializable summary without the wall-clock time (kept out so artifacts are reproducible)."""
        d = asdict(self)
        d.pop("partition")
        d.pop("wall_clock")
        return d


class SolverError(RuntimeError):
    """Non-convergence; ``report`` holds the partial history."""

    def __init__(self, message: str, report: SolveReport):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# shared pieces


def _embed(grid, m_rows) -> sp.csr_matrix:
    """Map interior-row matrices into full-size rows."""
    nodes = grid.interior
    return sp.csr_matrix((np.ones(nodes.size), (nodes, np.arange(nodes.size))), shape=(grid.size, m_rows))


def initial_guess(problem: ProblemSpec) -> np.ndarray:
    """Discrete harmonic extension of ``g``, clamped into ``[phi, psi]``."""
    grid = problem.grid
    h2 = np.asarray(grid.spacing) ** 2
    shape = grid.shape
    L = sp.csr_matrix((grid.size, grid.size))
    for k in range(grid.dim):
        n = shape[k]
        D = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) / h2[k]
        ops = [sp.identity(s) for s in shape]
        ops[k] = D
        term = ops[0]
        for o in ops[1:]:
            term = sp.kron(term, o)
        L = L + term
    interior = ~grid.boundary_mask
    P = sp.diags(interior.astype(float))
    J = (P @ L + sp.diags((~interior).astype(float))).tocsc()
    rhs = problem.g_full()
    u = spsolve(J, rhs)
    u[grid.boundary] = problem.g
    inner = grid.interior
    u[inner] = np.clip(u[inner], problem.phi[inner], problem.psi[inner])
    return u


def _row_floor(J: sp.csr_matrix, u: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Per-row size of the rounding error committed when evaluating ``J u - rhs``."""
    return 32 * EPS * (abs(J) @ np.abs(u) + np.abs(rhs))


def mollified_problem(problem: ProblemSpec, eps: float) -> ProblemSpec:
    """Problem with mollified source and shifted mollified obstacles; ``eps == 0`` returns it unchanged.

    Operator coefficients are left as they are.
    """
    if eps == 0:
        return problem
    grid = problem.grid
    f_e = mollify(grid, problem.f, eps, "zero")
    phi_e, psi_e = shift_obstacles(grid, problem.phi, problem.psi, eps)
    return problem.replace(f=f_e, phi=phi_e, psi=psi_e)


def penalty_trace(u, phi, psi, delta: float) -> float:
    """``sup [(u - psi)^+ + (phi - u)^+] / delta``."""
    return float(np.max(np.maximum(u - psi, 0) + np.maximum(phi - u, 0)) / delta)


# ---------------------------------------------------------------------------
# penalized Newton


def solve_penalized(problem: ProblemSpec, delta: float, eps: float = 0.0, warm_start=None,
                    config: Optional[SolverConfig] = None, disc: Optional[DiscreteOperator] = None):
    """Semismooth Newton for ``F_h[u] + (u-psi)^+/delta - (phi-u)^+/delta = f`` with ``u = g`` on the boundary.

    Returns ``(u, report)``; raises :class:`SolverError` when the iteration cap is hit.
    """
    config = config or SolverConfig()
    if not delta > 0:
        raise ValueError("delta must be positive")
    t0 = time.perf_counter()
    prob = mollified_problem(problem, eps)
    grid = prob.grid
    disc = disc or DiscreteOperator(prob.operator)
    E = _embed(grid, disc.nodes.size)
    bnd = grid.boundary
    inner = grid.interior
    u = initial_guess(prob) if warm_start is None else as_field(grid, warm_start).copy()
    u[bnd] = prob.g
    report = SolveReport(method="penalized")
    bdiag = np.zeros(grid.size)
    bdiag[bnd] = 1.0
    for it in range(config.newton_iterations + 1):
        F, JF = disc.evaluate(u, jacobian=True)
        above = u[inner] - prob.psi[inner]
        below = prob.phi[inner] - u[inner]
        G = np.zeros(grid.size)
        G[inner] = F + np.maximum(above, 0) / delta - np.maximum(below, 0) / delta - prob.f[inner]
        G[bnd] = u[bnd] - prob.g
        pen = np.zeros(grid.size)
        pen[inner] = ((above > 0).astype(float) + (below > 0)) / delta
        J = (E @ JF + sp.diags(pen + bdiag)).tocsr()
        rhs = np.zeros(grid.size)
        rhs[inner] = np.abs(prob.f[inner]) + np.abs(np.where(above > 0, prob.psi[inner], 0)) / delta \
            + np.abs(np.where(below > 0, prob.phi[inner], 0)) / delta
        rhs[bnd] = prob.g
        floor = _row_floor(J, u, rhs)
        res = float(np.max(np.abs(G)))
        report.residual_history.append(res)
        report.roundoff_floor = float(floor.max())
        if np.all(np.abs(G) <= np.maximum(config.tolerance, floor)):
            report.converged = True
            break
        if it == config.newton_iterations:
            break
        du = spsolve(J.tocsc(), -G)
        u = u + config.damping * du
        if it > 0 and np.max(np.abs(du)) <= 4 * EPS * max(1.0, float(np.max(np.abs(u)))):
            # step below rounding level: further iterations cannot improve
            report.converged = np.all(np.abs(G) <= np.maximum(config.tolerance, 4 * floor))
            report.message = "stagnated at rounding level"
            break
    report.iterations = it
    report.final_residual = report.residual_history[-1]
    report.penalty_trace = [penalty_trace(u, prob.phi, prob.psi, delta)]
    report.wall_clock = time.perf_counter() - t0
    if not report.converged:
        report.message = report.message or f"Newton did not converge in {config.newton_iterations} steps"
        raise SolverError(f"penalized solve (delta={delta}): {report.message}", report)
    return u, report


def _tail_decreasing(tails: list, scale: float) -> bool:
    """Last three Cauchy increments decrease, ignoring increments at rounding level."""
    last = tails[-3:]
    noise = 1e3 * EPS * max(scale, 1.0)
    return all(b <= a or b <= noise for a, b in zip(last, last[1:]))


def continuation_solve(problem: ProblemSpec, config: Optional[SolverConfig] = None, initial=None):
    """Solve the penalized problem along ``delta0 -> delta_floor`` with warm starts.

    Records the delta path with Cauchy increments ``||u_delta - u_prev||`` and the
    penalty trace.  Returns ``(u, report)``.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    prob = mollified_problem(problem, config.epsilon)
    disc = DiscreteOperator(prob.operator)
    u = initial_guess(prob) if initial is None else as_field(prob.grid, initial).copy()
    report = SolveReport(method="penalized")
    tails = []
    prev = None
    for delta in config.delta_schedule():
        try:
            u, step = solve_penalized(prob, delta, 0.0, u, config, disc)
        except SolverError as err:
            report.delta_path.append(dict(delta=delta, iterations=err.report.iterations,
                                          residual=err.report.final_residual, tail=None))
            report.residual_history.extend(err.report.residual_history)
            report.message = str(err)
            report.wall_clock = time.perf_counter() - t0
            raise SolverError(str(err), report) from None
        tail = None if prev is None else float(np.max(np.abs(u - prev)))
        if tail is not None:
            tails.append(tail)
        prev = u.copy()
        report.iterations += step.iterations
        report.residual_history.extend(step.residual_history)
        report.penalty_trace.extend(step.penalty_trace)
        report.roundoff_floor = max(report.roundoff_floor, step.roundoff_floor)
        report.delta_path.append(dict(delta=delta, iterations=step.iterations,
                                      residual=step.final_residual, tail=tail,
                                      penalty=step.penalty_trace[0]))
        log.debug("delta=%g newton=%d tail=%s", delta, step.iterations, tail)
    report.final_residual = report.residual_history[-1]
    report.converged = True
    if len(tails) >= 3 and not _tail_decreasing(tails, float(np.max(np.abs(u)))):
        report.message = "Cauchy increments did not decrease over the last three deltas"
    part = coincidence_sets(prob.grid, u, prob.phi, prob.psi, default_contact_tol(prob.grid, config.tolerance))
    report.partition = part
    report.regime_counts = part.counts()
    report.wall_clock = time.perf_counter() - t0
    return u, report


# ---------------------------------------------------------------------------
# policy iteration


def regime_policy(A, B, C, tie_break: str = "pde-first") -> np.ndarray:
    """Regime per interior node from the optimal switches of ``min(max(A, B), C)``."""
    mm = minmax_reduction(A, B, C)
    policy = np.where(mm.alpha == 0, LOWER, np.where(mm.beta == 1, PDE, UPPER))
    if tie_break == "contact-first":
        A, B, C = (np.asarray(v, dtype=float) for v in (A, B, C))
        policy = np.where((policy == PDE) & (A == B), UPPER, policy)
        policy = np.where((policy != LOWER) & (np.maximum(A, B) == C), LOWER, policy)
    return policy


def _diagonal(disc: DiscreteOperator, u) -> np.ndarray:
    """Center coefficient of the linearized scheme at each interior node (positive).

    Dividing ``F_h - f`` by it leaves the equation unchanged but puts the pde
    component in the units of ``u``, so it is comparable with the obstacle gaps
    when regimes are chosen; without it the ``1/h^2`` scale makes nodes hop
    between the two contact regimes.
    """
    J = disc.jacobian(disc.local(u))
    return np.asarray(J[np.arange(disc.nodes.size), disc.nodes]).reshape(-1)


def _policy_system(prob: ProblemSpec, disc: DiscreteOperator, E, policy, u):
    """Residual, Jacobian and rounding floor of the fixed-policy system."""
    grid = prob.grid
    inner = grid.interior
    bnd = grid.boundary
    F, JF = disc.evaluate(u, jacobian=True)
    pde = policy == PDE
    G = np.empty(grid.size)
    G[inner] = np.where(pde, F - prob.f[inner],
                        np.where(policy == UPPER, u[inner] - prob.psi[inner], u[inner] - prob.phi[inner]))
    G[bnd] = u[bnd] - prob.g
    row_pde = np.zeros(grid.size)
    row_pde[inner] = pde
    J = (sp.diags(row_pde) @ (E @ JF) + sp.diags(1.0 - row_pde)).tocsr()
    rhs = np.empty(grid.size)
    rhs[inner] = np.where(pde, prob.f[inner], np.where(policy == UPPER, prob.psi[inner], prob.phi[inner]))
    rhs[bnd] = prob.g
    return G, J, _row_floor(J, u, rhs)


def solve_complementarity(problem: ProblemSpec, config: Optional[SolverConfig] = None, initial=None):
    """Policy iteration on ``min(max(F_h[u] - f, u - psi), u - phi) = 0``.

    Each sweep fixes the regime of every interior node (pde, upper contact,
    lower contact), solves the resulting system by Newton's method, and
    re-selects regimes.  A node whose regime alternates for more than two
    sweeps is frozen at its current choice.  Stops when the regimes are stable
    and the residual is below the tolerance or the rounding floor.
    Returns ``(u, report)``.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    prob = mollified_problem(problem, config.epsilon)
    grid = prob.grid
    disc = DiscreteOperator(prob.operator)
    E = _embed(grid, disc.nodes.size)
    u = initial_guess(prob) if initial is None else as_field(grid, initial).copy()
    u[grid.boundary] = prob.g
    report = SolveReport(method="direct")

    A, B, C = obstacle_components(prob, u, disc)
    policy = regime_policy(A / _diagonal(disc, u), B, C, config.tie_break)
    history = [policy.copy()]
    flips = np.zeros(policy.size, dtype=int)
    frozen = np.zeros(policy.size, dtype=bool)
    stable = False
    for sweep in range(1, config.max_iterations + 1):
        floor = None
        for _ in range(config.newton_iterations):
            G, J, floor = _policy_system(prob, disc, E, policy, u)
            if np.all(np.abs(G) <= np.maximum(config.tolerance, floor)):
                break
            du = spsolve(J.tocsc(), -G)
            u = u + config.damping * du
            if np.max(np.abs(du)) <= 4 * EPS * max(1.0, float(np.max(np.abs(u)))):
                break
        A, B, C = obstacle_components(prob, u, disc)
        res = np.abs(np.minimum(np.maximum(A, B), C))
        report.residual_history.append(float(res.max()) if res.size else 0.0)
        report.roundoff_floor = float(floor.max())
        new = regime_policy(A / _diagonal(disc, u), B, C, config.tie_break)
        new[frozen] = policy[frozen]
        changed = new != policy
        if len(history) >= 2:
            # back to the regime of two sweeps ago: count as an oscillation
            flips += changed & (new == history[-2])
            cycling = flips > 2
            if np.any(cycling & ~frozen):
                frozen |= cycling
                new[cycling] = policy[cycling]
                changed = new != policy
        report.iterations = sweep
        if not changed.any():
            stable = True
            break
        policy = new
        history = history[-1:] + [policy.copy()]

    report.frozen_nodes = int(frozen.sum())
    inner_floor = floor[grid.interior] if floor is not None else 0.0
    ok = stable and np.all(res <= np.maximum(config.tolerance, 4 * inner_floor))
    report.final_residual = report.residual_history[-1]
    report.converged = bool(ok)
    part = coincidence_sets(grid, u, prob.phi, prob.psi, default_contact_tol(grid, config.tolerance))
    report.partition = part
    report.regime_counts = part.counts()
    report.wall_clock = time.perf_counter() - t0
    if not ok:
        if not stable:
            report.message = f"regimes still changing after {config.max_iterations} sweeps"
        else:
            report.message = (f"regimes stable but residual {report.final_residual:.3e} exceeds tolerance"
                              + (f" ({report.frozen_nodes} frozen nodes)" if report.frozen_nodes else ""))
        raise SolverError(report.message, report)
    return u, report


# ---------------------------------------------------------------------------
# verification


@dataclass
class Verification:
    obstacle_violation: float
    residual_max: float
    subsolution_violation: float     # max of F_h - f where u > phi + tol
    supersolution_violation: float   # max of f - F_h where u < psi - tol
    regime_counts: dict
    tol: float
    worst_node: Optional[int] = None         # node of the largest obstacle violation
    worst_point: Optional[tuple] = None
    partition: Optional[RegimePartition] = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return max(self.obstacle_violation, self.residual_max,
                   self.subsolution_violation, self.supersolution_violation) <= self.tol


def verify_solution(problem: ProblemSpec, u, tol: float = 1e-9) -> Verification:
    """Check the sandwich ``phi <= u <= psi``, the complementarity residual and the one-sided PDE bounds."""
    grid = problem.grid
    u = as_field(grid, u)
    disc = DiscreteOperator(problem.operator)
    inner = grid.interior
    excess = np.maximum(problem.phi - u, u - problem.psi)
    worst = int(np.argmax(excess))
    viol = float(excess[worst])
    res = assemble_residual(problem, u, disc)
    A = disc.evaluate(u) - problem.f[inner]
    free_lo = u[inner] > problem.phi[inner] + tol
    free_hi = u[inner] < problem.psi[inner] - tol
    sub = float(np.max(A[free_lo], initial=0.0))
    sup = float(np.max(-A[free_hi], initial=0.0))
    part = coincidence_sets(grid, u, problem.phi, problem.psi, tol)
    where = (worst, tuple(float(c) for c in grid.coords[worst])) if viol > 0 else (None, None)
    return Verification(max(viol, 0.0), float(np.max(np.abs(res[inner]), initial=0.0)), sub, sup,
                        part.counts(), tol, *where, part)
