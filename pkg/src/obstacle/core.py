"""Grids, nodal fields, exponent bookkeeping and problem data.

Fields are plain 1-D float arrays with one entry per grid node, stored in
row-major order (first axis slowest).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:
    from .operators import Operator


@dataclass(frozen=True)
class Grid:
    """Uniform tensor lattice on a rectangle ``[lower, upper]`` in 1 or 2 dimensions."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        shape = tuple(int(v) for v in np.atleast_1d(self.shape))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "shape", shape)
        if not (len(lower) == len(upper) == len(shape)):
            raise ValueError("lower, upper and shape must have the same length")
        if len(shape) not in (1, 2):
            raise ValueError(f"only 1 or 2 dimensions are supported, got {len(shape)}")
        for lo, hi, n in zip(lower, upper, shape):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bounds must satisfy lower < upper, got [{lo}, {hi}]")
            if n < 3:
                raise ValueError(f"need at least 3 nodes per axis, got {n}")

    @classmethod
    def uniform(cls, lower, upper, nodes) -> "Grid":
        return cls(tuple(np.atleast_1d(lower)), tuple(np.atleast_1d(upper)), tuple(np.atleast_1d(nodes)))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.lower, self.upper, self.shape))

    @property
    def h(self) -> float:
        """Largest spacing over the axes."""
        return max(self.spacing)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        # lo + i*h keeps dyadic coordinates exact
        return tuple(lo + np.arange(n) * h for lo, n, h in zip(self.lower, self.shape, self.spacing))

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        out = np.stack([m.ravel() for m in mesh], axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def multi_index(self) -> np.ndarray:
        out = np.stack(np.unravel_index(np.arange(self.size), self.shape), axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        idx = self.multi_index
        mask = np.zeros(self.size, dtype=bool)
        for k, n in enumerate(self.shape):
            mask |= (idx[:, k] == 0) | (idx[:, k] == n - 1)
        mask.setflags(write=False)
        return mask

    @cached_property
    def boundary(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    def boundary_distance(self) -> np.ndarray:
        """Distance of every node to the rectangle boundary."""
        x = self.coords
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return np.min(np.minimum(x - lo, hi - x), axis=1)

    def interior_subdomain(self, r: float) -> np.ndarray:
        """Mask of the nodes at distance greater than ``r`` from the boundary."""
        return self.boundary_distance() > r

    def nearest_node(self, point) -> int:
        point = np.atleast_1d(np.asarray(point, dtype=float))
        d = np.sum((self.coords - point) ** 2, axis=1)
        return int(np.argmin(d))

    def ball(self, center, r: float) -> np.ndarray:
        """Mask of nodes within Euclidean distance ``r`` of ``center`` (closed ball)."""
        center = np.atleast_1d(np.asarray(center, dtype=float))
        d = np.sqrt(np.sum((self.coords - center) ** 2, axis=1))
        return d <= r * (1 + 1e-12) + 1e-14

    def neighbor(self, node: int, offset) -> Optional[int]:
        """Index of ``node + offset`` (offset in lattice units) or None if outside."""
        idx = self.multi_index[node] + np.asarray(offset, dtype=int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.shape)):
            return None
        return int(np.ravel_multi_index(tuple(idx), self.shape))

    def evaluate(self, func) -> np.ndarray:
        """Evaluate ``func(*coordinate_arrays)`` at every node."""
        vals = func(*[self.coords[:, k] for k in range(self.dim)])
        return as_field(self, np.broadcast_to(np.asarray(vals, dtype=float), (self.size,)))

    def exterior_density(self) -> float:
        """Measure-density constant of the complement of a rectangle.

        The infimum of ``|B_r(x) \\ Omega| / r^n`` over boundary points and small
        ``r`` is attained on an edge, where half the ball lies outside.
        """
        return unit_ball_volume(self.dim) / 2


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def as_field(grid: Grid, values) -> np.ndarray:
    """Validate nodal values against ``grid`` and return them as a float array."""
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.size == 1 and grid.size != 1:
        arr = np.full(grid.size, arr[0])
    if arr.shape != (grid.size,):
        raise ValueError(f"field has {arr.size} values, grid has {grid.size} nodes")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    return arr


def _region_mask(grid: Grid, region) -> np.ndarray:
    if region is None:
        return np.ones(grid.size, dtype=bool)
    region = np.asarray(region)
    if region.dtype == bool:
        if region.shape != (grid.size,):
            raise ValueError("region mask has wrong length")
        return region
    mask = np.zeros(grid.size, dtype=bool)
    mask[region] = True
    return mask


def lp_quasinorm(grid: Grid, values, p: float, region=None) -> float:
    """Discrete ``(sum |u|^p h^n)^(1/p)`` over ``region`` (mask or indices); any ``p > 0``.

    ``p = inf`` gives the max norm.
    """
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    mask = _region_mask(grid, region)
    if not mask.any():
        raise ValueError("region is empty")
    u = np.abs(np.asarray(values, dtype=float)[mask])
    if math.isinf(p):
        return float(u.max())
    scale = u.max()
    if scale == 0:
        return 0.0
    # factor out the max to avoid under/overflow for small or large p
    total = np.sum((u / scale) ** p) * grid.cell_volume
    return float(scale * total ** (1.0 / p))


def quasinorm_constant(p: float) -> float:
    """Constant in ``||u+v||_p <= C_p (||u||_p + ||v||_p)``."""
    return 1.0 if p >= 1 else 2.0 ** (1.0 / p - 1.0)


@dataclass(frozen=True)
class ExponentSet:
    """Integrability exponents and the Hölder exponents derived from them."""

    n: int
    p: float
    q: float
    beta1: float
    alpha0: float = field(init=False)
    beta0: Optional[float] = field(init=False)
    beta2: Optional[float] = field(init=False)

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError(f"p must be positive, got {self.p}")
        if not self.q > self.n:
            raise ValueError(f"need q > n, got q={self.q}, n={self.n}")
        if not self.p <= self.q:
            raise ValueError(f"need p <= q, got p={self.p}, q={self.q}")
        if not 0 < self.beta1 < 1:
            raise ValueError(f"beta1 must lie in (0, 1), got {self.beta1}")
        alpha0 = 2 - self.n / min(self.p, self.n)
        beta0 = 1 - self.n / self.p if self.p > self.n else None
        object.__setattr__(self, "alpha0", alpha0)
        object.__setattr__(self, "beta0", beta0)
        object.__setattr__(self, "beta2", None if beta0 is None else min(beta0, self.beta1))

    @property
    def p_wedge_n(self) -> float:
        return min(self.p, self.n)


def compute_exponents(n: int, p: float, q: float, beta1: float) -> ExponentSet:
    return ExponentSet(n=n, p=p, q=q, beta1=beta1)


# ---------------------------------------------------------------------------
# pair differences by lattice offset


def lattice_offsets(grid: Grid, max_dist: float) -> list[tuple[tuple[int, ...], float]]:
    """Nonzero lattice offsets (one of each ``±`` pair) with length ``<= max_dist``."""
    h = np.asarray(grid.spacing)
    reach = [min(n - 1, int(math.floor(max_dist / hk * (1 + 1e-12)))) for n, hk in zip(grid.shape, h)]
    zero = (0,) * grid.dim
    out = []
    for off in itertools.product(*[range(-m, m + 1) for m in reach]):
        if off <= zero:
            continue  # lexicographic half keeps one representative per pair
        dist = float(np.sqrt(np.sum((np.asarray(off) * h) ** 2)))
        if dist <= max_dist * (1 + 1e-12) + 1e-14:
            out.append((off, dist))
    out.sort(key=lambda t: t[1])
    return out


def offset_max_differences(grid: Grid, fields, max_dist: float, mask=None):
    """For every lattice offset up to ``max_dist``, the largest ``|u(x+o) - u(x)|``.

    ``fields`` is a sequence of nodal arrays; the max is taken over all of them
    and over pairs with both endpoints in ``mask``.  Returns ``(distances, maxdiff)``
    sorted by distance; offsets with no admissible pair are dropped.
    """
    mask = _region_mask(grid, mask).reshape(grid.shape)
    arrs = [np.asarray(f, dtype=float).reshape(grid.shape) for f in fields]
    dists, diffs = [], []
    for off, dist in lattice_offsets(grid, max_dist):
        src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, grid.shape))
        dst = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, grid.shape))
        ok = mask[src] & mask[dst]
        if not ok.any():
            continue
        best = 0.0
        for a in arrs:
            best = max(best, float(np.max(np.abs(a[dst] - a[src])[ok])))
        dists.append(dist)
        diffs.append(best)
    return np.asarray(dists), np.asarray(diffs)


def sample_modulus(grid: Grid, phi, psi, radii) -> list[tuple[float, float]]:
    """Joint modulus of continuity of the two obstacles at the given radii.

    ``sigma0(r) = max |phi(x)-phi(y)| v |psi(x)-psi(y)|`` over node pairs with
    ``|x - y| <= r``.  Exact on the lattice.
    """
    radii = [float(r) for r in np.atleast_1d(radii)]
    if any(not r > 0 for r in radii):
        raise ValueError("radii must be positive")
    phi = as_field(grid, phi)
    psi = as_field(grid, psi)
    dists, diffs = offset_max_differences(grid, [phi, psi], max(radii))
    out = []
    for r in radii:
        sel = dists <= r * (1 + 1e-12) + 1e-14
        out.append((r, float(diffs[sel].max()) if sel.any() else 0.0))
    return out


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Discrete bilateral obstacle problem with Dirichlet data.

    ``g`` holds values on ``grid.boundary`` nodes only (in that order); a full
    nodal array is also accepted and restricted.
    """

    grid: Grid
    operator: "Operator"
    f: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    g: np.ndarray
    exponents: ExponentSet
    r0: Optional[float] = None

    def __post_init__(self):
        grid = self.grid
        op = self.operator
        if op.grid != grid:
            raise ValueError("operator is defined on a different grid")
        if not 0 < op.lam <= op.Lam:
            raise ValueError(f"ellipticity: need 0 < lambda <= Lambda, got {op.lam}, {op.Lam}")
        if np.any(op.mu < 0):
            raise ValueError("mu must be nonnegative")
        f = as_field(grid, self.f)
        phi = as_field(grid, self.phi)
        psi = as_field(grid, self.psi)
        g = np.array(self.g, dtype=float).reshape(-1)
        if g.size == 1:
            g = np.full(grid.boundary.size, g[0])
        elif g.size == grid.size:
            g = g[grid.boundary]
        if g.shape != grid.boundary.shape or not np.all(np.isfinite(g)):
            raise ValueError("g must hold one finite value per boundary node")
        for name, arr in (("f", f), ("phi", phi), ("psi", psi), ("g", g)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        bad = np.flatnonzero(phi > psi)
        if bad.size:
            raise ValueError(f"obstacles: phi > psi at {bad.size} nodes (first at {grid.coords[bad[0]]})")
        b = grid.boundary
        bad = np.flatnonzero((phi[b] > g) | (g > psi[b]))
        if bad.size:
            raise ValueError(f"boundary compatibility phi <= g <= psi fails at {grid.coords[b[bad[0]]]}")
        if self.r0 is not None:
            if not self.r0 > 0:
                raise ValueError("r0 must be positive")
            gap = float(np.min(psi - phi))
            if gap < self.r0:
                raise ValueError(f"obstacle separation: min(psi - phi) = {gap} < r0 = {self.r0}")
        if self.exponents.n < grid.dim:
            raise ValueError("exponent dimension is smaller than the grid dimension")

    @property
    def lam(self) -> float:
        return self.operator.lam

    @property
    def Lam(self) -> float:
        return self.operator.Lam

    @property
    def mu(self) -> np.ndarray:
        return self.operator.mu

    def g_full(self, fill=None) -> np.ndarray:
        """Nodal array with ``g`` on boundary nodes and ``fill`` (default 0) inside."""
        out = np.zeros(self.grid.size) if fill is None else np.array(fill, dtype=float)
        out[self.grid.boundary] = self.g
        return out

    def replace(self, **changes) -> "ProblemSpec":
        kw = dict(grid=self.grid, operator=self.operator, f=self.f, phi=self.phi,
                  psi=self.psi, g=self.g, exponents=self.exponents, r0=self.r0)
        kw.update(changes)
        return ProblemSpec(**kw)
