"""Monotone finite differences for F, the obstacle residual, and discrete mollification.

Every interior node sees its neighbors along the coordinate axes and, in 2-D,
along the two diagonals.  Boundary nodes carry Dirichlet rows, so interior
stencils never need one-sided second differences.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .core import Grid, ProblemSpec, as_field, sample_modulus
from .operators import (BellmanOperator, CustomOperator, LinearOperator, Operator,
                        PucciOperator)

EPS = np.finfo(float).eps

DIRECTIONS = {1: ((1,),), 2: ((1, 0), (0, 1), (1, 1), (1, -1))}
# orthogonal direction pairs used by the wide-stencil Pucci operator
PAIRS = {1: ((0,),), 2: ((0, 1), (2, 3))}


def _neighbor_indices(grid: Grid, nodes: np.ndarray, offset) -> np.ndarray:
    idx = grid.multi_index[nodes] + np.asarray(offset)
    return np.ravel_multi_index(tuple(idx.T), grid.shape)


def directional_second_difference(grid: Grid, u, node: int, direction) -> float:
    """``(u(x+d) - 2u(x) + u(x-d)) / |d|^2`` with ``d`` a lattice offset scaled by the spacing."""
    direction = tuple(int(v) for v in np.atleast_1d(direction))
    if len(direction) != grid.dim or not any(direction):
        raise ValueError(f"bad direction {direction} for a {grid.dim}-D grid")
    up = grid.neighbor(node, direction)
    down = grid.neighbor(node, tuple(-v for v in direction))
    if up is None or down is None:
        raise ValueError(f"node {node} has no neighbor along {direction}; it lies on the boundary")
    step2 = float(np.sum((np.asarray(direction) * np.asarray(grid.spacing)) ** 2))
    u = np.asarray(u, dtype=float)
    return float((u[up] - 2 * u[node] + u[down]) / step2)


@dataclass
class LocalDerivatives:
    """Value of a discrete operator and its derivatives with respect to the difference quotients."""

    value: np.ndarray       # (m,)
    d_second: np.ndarray    # (ndirs, m) w.r.t. normalized second differences
    d_forward: np.ndarray   # (dim, m) w.r.t. forward differences D+
    d_backward: np.ndarray  # (dim, m) w.r.t. backward differences D-


@dataclass
class Primitives:
    second: np.ndarray    # (ndirs, m)
    forward: np.ndarray   # (dim, m)
    backward: np.ndarray  # (dim, m)


def _linear_weights(op: LinearOperator, nodes: np.ndarray, isotropic: bool):
    """Directional weights for ``Tr(A X)`` and upwind drift split, monotone by diagonal dominance."""
    A = op.A[nodes]
    n = op.grid.dim
    if n == 1:
        w = A[:, 0, 0][None]
    else:
        a12 = A[:, 0, 1]
        if np.any(a12 != 0) and not isotropic:
            raise ValueError("mixed second derivatives need equal spacing on both axes")
        w0 = A[:, 0, 0] - np.abs(a12)
        w1 = A[:, 1, 1] - np.abs(a12)
        if np.any(w0 < 0) or np.any(w1 < 0):
            raise ValueError("coefficient matrix is not diagonally dominant; "
                             "the 9-point stencil would not be monotone")
        # unit-normalized diagonal differences carry (X11 + X22 +- 2 X12) / 2
        w = np.stack([w0, w1, 2 * np.maximum(a12, 0), 2 * np.maximum(-a12, 0)])
    b = op.b[nodes].T
    return w, np.maximum(b, 0), np.maximum(-b, 0)


class DiscreteOperator:
    """Monotone finite-difference realization of an operator on the interior nodes.

    ``evaluate(u)`` returns ``F_h[u]`` on ``grid.interior`` and, on request, the
    sparse Jacobian of the active branch (rows: interior nodes, columns: all
    nodes).  The residual is nonincreasing in every neighbor value.
    """

    def __init__(self, op: Operator):
        grid = op.grid
        self.op = op
        self.grid = grid
        self.nodes = grid.interior
        n = grid.dim
        h = np.asarray(grid.spacing)
        self.isotropic = n == 1 or abs(h[0] - h[1]) <= 1e-12 * h.max()
        self.directions = DIRECTIONS[n]
        self.step2 = np.array([np.sum((np.asarray(d) * h) ** 2) for d in self.directions])
        self.plus = np.array([_neighbor_indices(grid, self.nodes, d) for d in self.directions])
        self.minus = np.array([_neighbor_indices(grid, self.nodes, tuple(-v for v in d))
                               for d in self.directions])
        self.h = h
        self._axis = list(range(n))  # axis k is direction k

        if isinstance(op, LinearOperator):
            self._members = [_linear_weights(op, self.nodes, self.isotropic)]
        elif isinstance(op, BellmanOperator):
            self._members = [_linear_weights(m, self.nodes, self.isotropic) for m in op.members]
        elif isinstance(op, PucciOperator):
            if not self.isotropic:
                raise ValueError("the wide-stencil Pucci scheme needs equal spacing on both axes")
            self._mu = op.mu[self.nodes]
        elif isinstance(op, CustomOperator):
            if op.scheme is None:
                raise ValueError("custom operator has no monotone discretization (scheme)")
            if op.structure_report is None or not op.structure_report.passed:
                raise ValueError("custom operator lacks a passing structure-condition report")
        else:
            raise TypeError(f"cannot discretize {type(op).__name__}")

    # -- primitives -------------------------------------------------------

    def primitives(self, u) -> Primitives:
        u = np.asarray(u, dtype=float)
        uc = u[self.nodes]
        second = (u[self.plus] - 2 * uc + u[self.minus]) / self.step2[:, None]
        ax = self._axis
        forward = (u[self.plus[ax]] - uc) / self.h[:, None]
        backward = (uc - u[self.minus[ax]]) / self.h[:, None]
        return Primitives(second, forward, backward)

    # -- branches ---------------------------------------------------------

    def _linear(self, prim: Primitives, member):
        w, bp, bm = member
        value = -np.sum(w * prim.second, axis=0) + np.sum(bp * prim.backward - bm * prim.forward, axis=0)
        return LocalDerivatives(value, -w, -bm, bp)

    def _pucci(self, prim: Primitives) -> LocalDerivatives:
        op = self.op
        lam, Lam = op.lam, op.Lam
        s = prim.second
        if op.sign == "+":
            g = Lam * np.maximum(-s, 0) - lam * np.maximum(s, 0)
            dg = np.where(s < 0, -Lam, -lam)
        else:
            g = lam * np.maximum(-s, 0) - Lam * np.maximum(s, 0)
            dg = np.where(s < 0, -lam, -Lam)
        pairs = PAIRS[self.grid.dim]
        pair_vals = np.array([g[list(p)].sum(axis=0) for p in pairs])
        # ties go to the first pair (the axes)
        choice = np.argmax(pair_vals, axis=0) if op.sign == "+" else np.argmin(pair_vals, axis=0)
        value = pair_vals[choice, np.arange(s.shape[1])]
        d_second = np.zeros_like(s)
        for k, p in enumerate(pairs):
            sel = choice == k
            for d in p:
                d_second[d, sel] = dg[d, sel]

        fw, bw = prim.forward, prim.backward
        if op.sign == "+":
            # mu * |Du| upwinded: q_i = max(D-u, -D+u, 0)
            cand = np.stack([bw, -fw, np.zeros_like(bw)])
        else:
            # -mu * |Du| with q_i = max(-D-u, D+u, 0)
            cand = np.stack([-bw, fw, np.zeros_like(bw)])
        branch = np.argmax(cand, axis=0)
        q = np.take_along_axis(cand, branch[None], axis=0)[0]
        norm = np.sqrt(np.sum(q * q, axis=0))
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, q / safe, 0.0) * self._mu
        # both signs give the same derivative pattern: +coef on D-u, -coef on D+u
        value = value + self._mu * norm if op.sign == "+" else value - self._mu * norm
        d_backward = np.where(branch == 0, coef, 0.0)
        d_forward = np.where(branch == 1, -coef, 0.0)
        return LocalDerivatives(value, d_second, d_forward, d_backward)

    def local(self, u) -> LocalDerivatives:
        prim = self.primitives(u)
        op = self.op
        if isinstance(op, PucciOperator):
            return self._pucci(prim)
        if isinstance(op, CustomOperator):
            value, d_second, d_forward, d_backward = op.scheme(self, prim)
            return LocalDerivatives(np.asarray(value), np.asarray(d_second),
                                    np.asarray(d_forward), np.asarray(d_backward))
        branches = [self._linear(prim, m) for m in self._members]
        if len(branches) == 1:
            return branches[0]
        vals = np.array([b.value for b in branches])
        choice = np.argmax(vals, axis=0)
        cols = np.arange(vals.shape[1])
        pick = lambda name: np.array([getattr(b, name) for b in branches])[choice, :, cols].T  # noqa: E731
        return LocalDerivatives(vals[choice, cols], pick("d_second"), pick("d_forward"), pick("d_backward"))

    # -- assembly ---------------------------------------------------------

    def jacobian(self, loc: LocalDerivatives) -> sp.csr_matrix:
        m = self.nodes.size
        rows = np.arange(m)
        inv2 = 1.0 / self.step2[:, None]
        center = -2 * np.sum(loc.d_second * inv2, axis=0)
        plus = loc.d_second * inv2
        minus = plus.copy()
        for k in self._axis:
            center += (-loc.d_forward[k] + loc.d_backward[k]) / self.h[k]
            plus[k] += loc.d_forward[k] / self.h[k]
            minus[k] -= loc.d_backward[k] / self.h[k]
        r = np.concatenate([rows] + [rows] * (2 * len(self.directions)))
        c = np.concatenate([self.nodes] + list(self.plus) + list(self.minus))
        v = np.concatenate([center] + list(plus) + list(minus))
        return sp.csr_matrix((v, (r, c)), shape=(m, self.grid.size))

    def evaluate(self, u, jacobian: bool = False):
        loc = self.local(u)
        return (loc.value, self.jacobian(loc)) if jacobian else loc.value

    def stencil(self, u, node: int) -> dict:
        """Linearized stencil at ``node``: lattice offset -> coefficient."""
        pos = np.searchsorted(self.nodes, node)
        if pos >= self.nodes.size or self.nodes[pos] != node:
            raise ValueError(f"node {node} is not interior")
        row = self.evaluate(u, jacobian=True)[1].getrow(pos).tocoo()
        base = self.grid.multi_index[node]
        return {tuple(int(v) for v in self.grid.multi_index[c] - base): float(val)
                for c, val in zip(row.col, row.data) if val != 0}


def discretize_operator(op: Operator, u, node: int) -> float:
    disc = DiscreteOperator(op)
    pos = np.searchsorted(disc.nodes, node)
    if pos >= disc.nodes.size or disc.nodes[pos] != node:
        raise ValueError(f"node {node} is not interior")
    return float(disc.evaluate(u)[pos])


# ---------------------------------------------------------------------------
# mollification


def mollifier_kernel(grid: Grid, eps: float) -> np.ndarray:
    """Radial hat weights ``max(0, 1 - |y|/eps)`` on lattice offsets, normalized to unit mass."""
    h = np.asarray(grid.spacing)
    reach = [int(np.floor(eps / hk)) for hk in h]
    axes = [np.arange(-m, m + 1) * hk for m, hk in zip(reach, h)]
    mesh = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(sum(m * m for m in mesh))
    w = np.maximum(0.0, 1.0 - r / eps)
    return w / w.sum()


def mollify(grid: Grid, values, eps: float, extension: str = "zero") -> np.ndarray:
    """Discrete convolution with the hat kernel of radius ``eps``.

    ``extension`` is ``"zero"`` (data like f and mu) or ``"nearest"`` (obstacles
    and boundary data).  For ``eps`` below the grid spacing the field is
    returned unchanged with a warning.
    """
    values = as_field(grid, values)
    if eps < min(grid.spacing):
        warnings.warn(f"mollification radius {eps} is below the grid spacing; returning the field unchanged",
                      stacklevel=2)
        return values.copy()
    mode = {"zero": "constant", "nearest": "nearest"}[extension]
    out = ndimage.correlate(values.reshape(grid.shape), mollifier_kernel(grid, eps), mode=mode, cval=0.0)
    return out.reshape(-1)


def shift_obstacles(grid: Grid, phi, psi, eps: float, sigma=None):
    """Mollified obstacles pushed apart by the modulus: ``phi*rho - sigma0(eps)``, ``psi*rho + sigma0(eps)``.

    ``sigma`` is ``sigma0(eps)``; by default it is measured with
    :func:`obstacle.core.sample_modulus`.  The ordering ``phi_eps <= phi <= psi <= psi_eps``
    is checked; rounding-level excess is clipped, anything larger is an error.
    """
    phi = as_field(grid, phi)
    psi = as_field(grid, psi)
    if sigma is None:
        sigma = sample_modulus(grid, phi, psi, [eps])[0][1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        phi_e = mollify(grid, phi, eps, "nearest") - sigma
        psi_e = mollify(grid, psi, eps, "nearest") + sigma
    slack = 16 * EPS * (1 + np.maximum(np.abs(phi), np.abs(psi)))
    over = np.max(np.concatenate([phi_e - phi - slack, psi - psi_e - slack]))
    if over > 0:
        worst = int(np.argmax(np.maximum(phi_e - phi, psi - psi_e)))
        raise ValueError(f"shifted obstacles break phi_eps <= phi <= psi <= psi_eps by {over:.3e} "
                         f"at {grid.coords[worst]}; sigma0(eps) = {sigma} is too small")
    return np.minimum(phi_e, phi), np.maximum(psi_e, psi)


# ---------------------------------------------------------------------------
# obstacle residual


def obstacle_components(problem: ProblemSpec, u, disc: DiscreteOperator | None = None):
    """``(F_h[u] - f, u - psi, u - phi)`` on the interior nodes."""
    disc = disc or DiscreteOperator(problem.operator)
    u = np.asarray(u, dtype=float)
    nodes = disc.nodes
    A = disc.evaluate(u) - problem.f[nodes]
    return A, u[nodes] - problem.psi[nodes], u[nodes] - problem.phi[nodes]


def assemble_residual(problem: ProblemSpec, u, disc: DiscreteOperator | None = None) -> np.ndarray:
    """Nodal residual: ``min(max(F_h[u]-f, u-psi), u-phi)`` inside, ``u - g`` on the boundary."""
    grid = problem.grid
    u = as_field(grid, u)
    A, B, C = obstacle_components(problem, u, disc)
    out = np.empty(grid.size)
    out[grid.interior] = np.minimum(np.maximum(A, B), C)
    out[grid.boundary] = u[grid.boundary] - problem.g
    return out
