"""Pointwise operators F(x, xi, X), Pucci extremal operators and the Isaacs reduction.

Matrices are numpy arrays of shape ``(..., n, n)`` with ``n`` in {1, 2}.  Only
the upper triangle is read, so every input is treated as symmetric.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Grid, as_field

EPS = np.finfo(float).eps


def sym_eigvals(X) -> np.ndarray:
    """Eigenvalues of symmetric 1x1 or 2x2 matrices, shape ``(..., n)``."""
    X = np.asarray(X, dtype=float)
    n = X.shape[-1]
    if X.shape[-2:] != (n, n) or n not in (1, 2):
        raise ValueError(f"expected (..., n, n) with n in (1, 2), got {X.shape}")
    if n == 1:
        return X[..., 0, :1].copy()
    a, b, c = X[..., 0, 0], X[..., 0, 1], X[..., 1, 1]
    mean = 0.5 * (a + c)
    # hypot is never negative, so the discriminant needs no clamp
    rad = np.hypot(0.5 * (a - c), b)
    return np.stack([mean + rad, mean - rad], axis=-1)


def sym_trace_product(A, X) -> np.ndarray:
    """``Tr(A X)`` reading only upper triangles."""
    A = np.asarray(A, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.shape[-1] == 1:
        return A[..., 0, 0] * X[..., 0, 0]
    return A[..., 0, 0] * X[..., 0, 0] + A[..., 1, 1] * X[..., 1, 1] + 2 * A[..., 0, 1] * X[..., 0, 1]


def spectral_norm(X) -> np.ndarray:
    return np.max(np.abs(sym_eigvals(X)), axis=-1)


def _check_ellipticity(lam, Lam):
    if not (lam > 0 and lam <= Lam):
        raise ValueError(f"ellipticity: need 0 < lambda <= Lambda, got {lam}, {Lam}")


def pucci_extremal(sign: str, X, lam: float, Lam: float):
    """Pucci maximal (``"+"``) or minimal (``"-"``) operator.

    ``P+(X) = Lambda * sum(e^-) - lambda * sum(e^+)`` over the eigenvalues of X;
    ``P-(X) = -P+(-X)``.
    """
    _check_ellipticity(lam, Lam)
    if sign == "-":
        return -pucci_extremal("+", -np.asarray(X, dtype=float), lam, Lam)
    if sign != "+":
        raise ValueError(f"sign must be '+' or '-', got {sign!r}")
    e = sym_eigvals(X)
    out = Lam * np.sum(np.maximum(-e, 0.0), axis=-1) - lam * np.sum(np.maximum(e, 0.0), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# operator families


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


class Operator:
    """Base for F(x, xi, X) on a grid, tagged with ellipticity bounds and gradient bound mu.

    Instances are treated as immutable; their coefficient arrays are read-only.
    """

    family = "abstract"

    def __init__(self, grid: Grid, lam: float, Lam: float, mu=0.0):
        _check_ellipticity(lam, Lam)
        mu = as_field(grid, mu)
        if np.any(mu < 0):
            raise ValueError("mu must be nonnegative")
        self.grid = grid
        self.lam = float(lam)
        self.Lam = float(Lam)
        self.mu = _frozen(mu)

    def evaluate(self, nodes, xi, X) -> np.ndarray:
        """Batch evaluation at node indices ``nodes`` with gradients ``xi`` and Hessians ``X``."""
        raise NotImplementedError

    def __call__(self, node: int, xi, X) -> float:
        return eval_operator(self, node, xi, X)

    def __repr__(self):
        return f"{type(self).__name__}(family={self.family!r}, lam={self.lam}, Lam={self.Lam})"


def _coefficient_matrices(grid: Grid, A) -> np.ndarray:
    n = grid.dim
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = A * np.eye(n)
    if A.shape == (n, n):
        A = np.broadcast_to(A, (grid.size, n, n))
    if A.shape != (grid.size, n, n):
        raise ValueError(f"coefficient matrix field must have shape {(grid.size, n, n)}, got {A.shape}")
    A = np.array(A)
    if n == 2:
        A[:, 1, 0] = A[:, 0, 1]
    if not np.all(np.isfinite(A)):
        raise ValueError("coefficient matrices must be finite")
    return A


class LinearOperator(Operator):
    """``F(x, xi, X) = -Tr(A(x) X) + b(x) . xi``.

    ``lam``/``Lam`` default to the extreme eigenvalues of A and ``mu`` to ``|b|``;
    explicit values are checked against the coefficients.
    """

    family = "linear"

    def __init__(self, grid: Grid, A, b=None, lam: Optional[float] = None,
                 Lam: Optional[float] = None, mu=None):
        A = _coefficient_matrices(grid, A)
        n = grid.dim
        if b is None:
            b = np.zeros((grid.size, n))
        b = np.array(np.broadcast_to(np.asarray(b, dtype=float), (grid.size, n)))
        eig = sym_eigvals(A)
        lam = float(eig.min()) if lam is None else float(lam)
        Lam = float(eig.max()) if Lam is None else float(Lam)
        bnorm = np.linalg.norm(b, axis=1)
        super().__init__(grid, lam, Lam, bnorm if mu is None else mu)
        tol = 1e-12 * max(1.0, Lam)
        if eig.min() < lam - tol or eig.max() > Lam + tol:
            raise ValueError(f"ellipticity: eigenvalues of A span [{eig.min()}, {eig.max()}], "
                             f"outside [{lam}, {Lam}]")
        if np.any(bnorm > self.mu + 1e-12 * (1 + bnorm)):
            raise ValueError("|b(x)| must not exceed mu(x)")
        self.A = _frozen(A)
        self.b = _frozen(b)

    def evaluate(self, nodes, xi, X):
        nodes = np.asarray(nodes)
        return -sym_trace_product(self.A[nodes], X) + np.sum(self.b[nodes] * np.asarray(xi, float), axis=-1)


class BellmanOperator(Operator):
    """Pointwise maximum of linear operators."""

    family = "bellman"

    def __init__(self, members: Sequence[LinearOperator]):
        members = tuple(members)
        if not members:
            raise ValueError("bellman operator needs at least one member")
        grid = members[0].grid
        if any(m.grid != grid for m in members):
            raise ValueError("members live on different grids")
        super().__init__(grid, min(m.lam for m in members), max(m.Lam for m in members),
                         np.max([m.mu for m in members], axis=0))
        self.members = members

    def evaluate(self, nodes, xi, X):
        return np.max([m.evaluate(nodes, xi, X) for m in self.members], axis=0)


class PucciOperator(Operator):
    """``P+(X) + mu|xi|`` (sign ``"+"``) or ``P-(X) - mu|xi|`` (sign ``"-"``)."""

    def __init__(self, grid: Grid, sign: str, lam: float, Lam: float, mu=0.0):
        if sign not in ("+", "-"):
            raise ValueError(f"sign must be '+' or '-', got {sign!r}")
        super().__init__(grid, lam, Lam, mu)
        self.sign = sign

    @property
    def family(self) -> str:
        return "pucci_plus" if self.sign == "+" else "pucci_minus"

    def evaluate(self, nodes, xi, X):
        grad = self.mu[np.asarray(nodes)] * np.linalg.norm(np.asarray(xi, float), axis=-1)
        p = pucci_extremal(self.sign, X, self.lam, self.Lam)
        return p + grad if self.sign == "+" else p - grad


class CustomOperator(Operator):
    """User-supplied ``func(x, xi, X) -> float`` with declared bounds.

    Solvers accept it only with a passing ``structure_report`` and a monotone
    ``scheme`` (see :func:`obstacle.discretize.DiscreteOperator`).
    """

    family = "custom"

    def __init__(self, grid: Grid, func: Callable, lam: float, Lam: float, mu=0.0,
                 scheme: Optional[Callable] = None, structure_report=None):
        super().__init__(grid, lam, Lam, mu)
        self.func = func
        self.scheme = scheme
        self.structure_report = structure_report

    def evaluate(self, nodes, xi, X):
        nodes = np.atleast_1d(nodes)
        xi = np.broadcast_to(np.asarray(xi, float), (nodes.size, self.grid.dim))
        X = np.broadcast_to(np.asarray(X, float), (nodes.size, self.grid.dim, self.grid.dim))
        return np.array([float(self.func(self.grid.coords[k], xi[i], X[i])) for i, k in enumerate(nodes)])

    def certified(self, samples: int = 10_000, seed: int = 0) -> "CustomOperator":
        """Copy carrying the structure-condition report of this operator."""
        report = check_structure_condition(self, self.lam, self.Lam, self.mu, samples, seed)
        return CustomOperator(self.grid, self.func, self.lam, self.Lam, self.mu,
                              scheme=self.scheme, structure_report=report)


def eval_operator(op: Operator, node: int, xi, X) -> float:
    n = op.grid.dim
    xi = np.asarray(xi, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    if xi.shape != (n,) or X.shape != (n, n):
        raise ValueError(f"dimension mismatch: grid is {n}-D, got xi {xi.shape}, X {X.shape}")
    if not 0 <= node < op.grid.size:
        raise ValueError(f"node {node} outside the grid")
    return float(np.asarray(op.evaluate(np.array([node]), xi[None], X[None]))[0])


# ---------------------------------------------------------------------------
# structure condition


@dataclass
class StructureReport:
    max_violation: float
    samples: int
    witnesses: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_violation <= 0


def random_symmetric(rng: np.random.Generator, count: int, n: int, scale=1.0) -> np.ndarray:
    M = rng.standard_normal((count, n, n)) * np.reshape(scale, (-1, 1, 1))
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _probe_matrices(n: int) -> np.ndarray:
    if n == 1:
        base = [np.eye(1)]
    else:
        base = [np.eye(2), np.diag([1.0, 0.0]), np.diag([0.0, 1.0]), np.diag([1.0, -1.0]),
                np.array([[0.0, 1.0], [1.0, 0.0]])]
    return np.array([s * m for m in base for s in (1.0, -1.0)])


def check_structure_condition(op: Operator, lam: float, Lam: float, mu, samples: int = 10_000,
                              seed: int = 0, max_witnesses: int = 10) -> StructureReport:
    """Sample both inequalities of the uniform ellipticity structure condition.

    For random ``(x, xi, eta, X, Y)`` the violation is
    ``max(P-(X-Y) - mu|xi-eta| - dF, dF - P+(X-Y) - mu|xi-eta|)`` minus a
    floating-point slack proportional to the magnitudes involved.  The report
    holds the largest violation (``<= 0`` means no counterexample found).
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    _check_ellipticity(lam, Lam)
    grid = op.grid
    mu = as_field(grid, mu)
    n = grid.dim
    rng = np.random.default_rng(seed)
    nodes = rng.integers(0, grid.size, samples)
    scale = 10.0 ** rng.uniform(-2, 2, samples)
    xi = rng.standard_normal((samples, n)) * scale[:, None]
    eta = rng.standard_normal((samples, n)) * scale[:, None]
    X = random_symmetric(rng, samples, n, scale)
    Y = random_symmetric(rng, samples, n, scale)
    # deterministic probes: pure second-order differences along principal directions
    probes = _probe_matrices(n)
    m = len(probes)
    pnodes = rng.integers(0, grid.size, m)
    pxi = rng.standard_normal((m, n))
    nodes = np.concatenate([nodes, pnodes])
    xi = np.concatenate([xi, pxi])
    eta = np.concatenate([eta, pxi])
    X = np.concatenate([X, probes])
    Y = np.concatenate([Y, np.zeros_like(probes)])

    F1 = op.evaluate(nodes, xi, X)
    F2 = op.evaluate(nodes, eta, Y)
    dF = F1 - F2
    Z = X - Y
    grad = mu[nodes] * np.linalg.norm(xi - eta, axis=1)
    lower = pucci_extremal("-", Z, lam, Lam) - grad
    upper = pucci_extremal("+", Z, lam, Lam) + grad
    slack = 64 * EPS * (np.abs(F1) + np.abs(F2) + Lam * n * np.abs(sym_eigvals(Z)).max(axis=-1) + grad)
    viol = np.maximum(lower - dF, dF - upper) - slack
    order = np.argsort(viol)[::-1]
    witnesses = [
        dict(node=int(nodes[i]), xi=xi[i].tolist(), eta=eta[i].tolist(), X=X[i].tolist(),
             Y=Y[i].tolist(), violation=float(viol[i]))
        for i in order[:max_witnesses] if viol[i] > 0
    ]
    return StructureReport(max_violation=float(viol.max()), samples=len(nodes), witnesses=witnesses)


# ---------------------------------------------------------------------------
# Isaacs reduction


@dataclass
class MinMaxResult:
    value: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


def minmax_reduction(A, B, C) -> MinMaxResult:
    """Value and extreme-point optimizers of ``min_a max_b [ab A + a(1-b) B + (1-a) C]``.

    The value is ``min(max(A, B), C)``.  Ties go to ``alpha = 1`` and then ``beta = 1``.
    Works elementwise on arrays.
    """
    A, B, C = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (A, B, C)))
    upper = np.maximum(A, B)
    beta = (A >= B).astype(int)
    alpha = (upper <= C).astype(int)
    return MinMaxResult(value=np.minimum(upper, C), alpha=alpha, beta=beta)


def isaacs_grid_value(A, B, C, step: float = 0.05) -> np.ndarray:
    """Brute-force ``min_a max_b`` of the affine family over a uniform (alpha, beta) grid."""
    A, B, C = (np.asarray(v, dtype=float)[..., None, None] for v in (A, B, C))
    t = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
    a = t[:, None]
    b = t[None, :]
    vals = a * b * A + a * (1 - b) * B + (1 - a) * C
    return vals.max(axis=-1).min(axis=-1)


# ---------------------------------------------------------------------------
# x-continuity of the operator


@dataclass
class ThetaEstimate:
    value: float
    norm_cap: float
    samples: int


def theta_samples(n: int, count: int = 1000, cap: float = 1e3, seed: int = 0) -> np.ndarray:
    """Symmetric matrices with spectral norms spread log-uniformly up to ``cap``."""
    rng = np.random.default_rng(seed)
    dirs = random_symmetric(rng, count, n)
    dirs /= spectral_norm(dirs)[:, None, None]
    dirs = np.concatenate([dirs, _probe_matrices(n)])
    t = 10.0 ** rng.uniform(-2, np.log10(cap), len(dirs))
    t[-len(_probe_matrices(n)):] = cap
    return dirs * t[:, None, None]


def theta_estimate(op: Operator, x: int, y: int, matrices=None, cap: float = 1e3,
                   count: int = 1000, seed: int = 0) -> ThetaEstimate:
    """Sampled ``sup |F(x,0,X) - F(y,0,X)| / (1 + ||X||)``."""
    if matrices is None:
        matrices = theta_samples(op.grid.dim, count, cap, seed)
    matrices = np.asarray(matrices, dtype=float)
    m = len(matrices)
    zero = np.zeros((m, op.grid.dim))
    Fx = op.evaluate(np.full(m, x), zero, matrices)
    Fy = op.evaluate(np.full(m, y), zero, matrices)
    ratio = np.abs(Fx - Fy) / (1 + spectral_norm(matrices))
    return ThetaEstimate(value=float(ratio.max()), norm_cap=float(spectral_norm(matrices).max()), samples=m)
