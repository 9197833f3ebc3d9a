"""Empirical regularity diagnostics: contact sets, oscillation decay, Hölder fits, Harnack ratios.

Balls are discrete: ``B_r(x)`` is the set of nodes within Euclidean distance
``r`` of ``x``, each carrying the cell volume of the grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import ExponentSet, Grid, as_field, lp_quasinorm, offset_max_differences
from .operators import Operator, theta_estimate


class Regime(IntEnum):
    BOUNDARY = -1
    PDE = 0
    UPPER = 1
    LOWER = 2


REGIME_NAMES = {Regime.BOUNDARY: "boundary", Regime.PDE: "pde",
                Regime.UPPER: "upper", Regime.LOWER: "lower"}


def default_contact_tol(grid: Grid, solver_tol: float = 1e-10) -> float:
    return 10 * solver_tol + grid.h ** 2


@dataclass
class RegimePartition:
    grid: Grid
    labels: np.ndarray  # Regime values per node, BOUNDARY on boundary nodes
    tol: float

    @property
    def lower(self) -> np.ndarray:
        """Mask of C^-[u] (lower contact)."""
        return self.labels == Regime.LOWER

    @property
    def upper(self) -> np.ndarray:
        """Mask of C^+[u] (upper contact)."""
        return self.labels == Regime.UPPER

    @property
    def contact(self) -> np.ndarray:
        return self.lower | self.upper

    @property
    def noncoincidence(self) -> np.ndarray:
        return self.labels == Regime.PDE

    def counts(self) -> dict:
        return {REGIME_NAMES[r]: int(np.sum(self.labels == r)) for r in (Regime.LOWER, Regime.UPPER, Regime.PDE)}

    def names(self) -> list[str]:
        return [REGIME_NAMES[Regime(v)] for v in self.labels]

    def noncoincidence_interior(self, r: float) -> np.ndarray:
        """``N_r[u]``: nodes farther than ``r`` from both the boundary and the contact set."""
        inside = self.grid.interior_subdomain(r)
        contact = np.flatnonzero(self.contact)
        if contact.size == 0:
            return inside & self.noncoincidence
        dist, _ = cKDTree(self.grid.coords[contact]).query(self.grid.coords)
        return inside & (dist > r)


def coincidence_sets(grid: Grid, u, phi, psi, tol: Optional[float] = None,
                     r0: Optional[float] = None) -> RegimePartition:
    """Label interior nodes as lower contact (``u - phi <= tol``), upper contact, or pde."""
    u = as_field(grid, u)
    phi = as_field(grid, phi)
    psi = as_field(grid, psi)
    if tol is None:
        tol = default_contact_tol(grid)
    if tol < 0:
        raise ValueError("contact tolerance must be nonnegative")
    near_lo = u - phi <= tol
    near_hi = psi - u <= tol
    both = near_lo & near_hi & ~grid.boundary_mask
    if both.any():
        if r0 is not None:
            k = int(np.flatnonzero(both)[0])
            raise ValueError(f"node {grid.coords[k]} touches both obstacles although psi - phi >= r0 = {r0}")
        closer_hi = (psi - u) < (u - phi)
        near_lo = near_lo & ~(both & closer_hi)
        near_hi = near_hi & ~(both & ~closer_hi)
    labels = np.full(grid.size, int(Regime.PDE))
    labels[near_hi] = Regime.UPPER
    labels[near_lo] = Regime.LOWER
    labels[grid.boundary_mask] = Regime.BOUNDARY
    return RegimePartition(grid, labels, float(tol))


# ---------------------------------------------------------------------------
# oscillation decay


@dataclass
class OscillationTrace:
    center: tuple
    radii: list
    sup: list
    inf: list
    omega: list
    theta: list          # None where omega(2r) == 0
    f_norm: float
    flags: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [dict(r=r, omega=w, theta=t) for r, w, t in zip(self.radii, self.omega, self.theta)]


def oscillation_decay(grid: Grid, u, f, center, radii, exponents: ExponentSet) -> OscillationTrace:
    """Sup, inf and oscillation of ``u`` on nested balls and the corrected decay ratios.

    ``theta_k = (omega(r_k) - r_k^alpha0 ||f||) / omega(2 r_k)`` with the norm of
    ``f`` in ``L^{p ^ n}`` over the largest doubled ball.
    """
    u = as_field(grid, u)
    f = as_field(grid, f)
    center = tuple(float(c) for c in np.atleast_1d(center))
    radii = sorted(float(r) for r in np.atleast_1d(radii))
    if not radii or radii[0] <= 0:
        raise ValueError("radii must be positive")
    room = float(np.min(np.minimum(np.asarray(center) - grid.lower, np.asarray(grid.upper) - center)))
    if 2 * radii[-1] > room * (1 + 1e-12):
        raise ValueError(f"ball of radius {2 * radii[-1]} around {center} leaves the domain")
    f_norm = lp_quasinorm(grid, f, exponents.p_wedge_n, grid.ball(center, 2 * radii[-1]))

    def extremes(r):
        vals = u[grid.ball(center, r)]
        return float(vals.max()), float(vals.min())

    sup, inf, omega, theta, flags = [], [], [], [], []
    for r in radii:
        M, m = extremes(r)
        M2, m2 = extremes(2 * r)
        sup.append(M)
        inf.append(m)
        omega.append(M - m)
        if M2 - m2 == 0:
            theta.append(None)
            flags.append(f"omega(2r) = 0 at r = {r}")
        else:
            theta.append((M - m - r ** exponents.alpha0 * f_norm) / (M2 - m2))
    return OscillationTrace(center, radii, sup, inf, omega, theta, f_norm, flags)


def dyadic_radii(grid: Grid, center, levels: Optional[int] = None) -> list[float]:
    """Radii ``R/2^k`` with ``2R`` the room around ``center``, down to twice the spacing."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    room = float(np.min(np.minimum(center - grid.lower, np.asarray(grid.upper) - center)))
    R = room / 2
    radii = []
    while R >= 2 * grid.h and (levels is None or len(radii) < levels):
        radii.append(R)
        R /= 2
    return radii


# ---------------------------------------------------------------------------
# Hölder fits


@dataclass
class HolderFit:
    exponent: float           # slope clamped to at most 1; nan when flagged
    seminorm: float
    residual: float
    slope: float
    distances: list
    sups: list
    flagged: bool = False
    message: str = ""


def holder_exponent(grid: Grid, values, region=None, max_dist: Optional[float] = None) -> HolderFit:
    """Log-log least-squares fit of dyadic-bin sup ``|u(x)-u(y)|`` against distance.

    Bin ``k`` holds pairs with distance in ``(h 2^(k-1), h 2^k]`` and is
    represented by its upper edge.  Scales run up to ``max_dist`` (default a
    quarter of the domain diameter).
    """
    values = as_field(grid, values)
    h = min(grid.spacing)
    if max_dist is None:
        max_dist = 0.25 * float(np.linalg.norm(np.asarray(grid.upper) - grid.lower))
    dists, diffs = offset_max_differences(grid, [values], max_dist, region)
    edges, sups = [], []
    k = 0
    while h * 2 ** k <= max_dist * (1 + 1e-12):
        hi = h * 2 ** k
        lo = 0.0 if k == 0 else hi / 2
        sel = (dists > lo * (1 + 1e-12)) & (dists <= hi * (1 + 1e-12))
        if sel.any():
            edges.append(hi)
            sups.append(float(diffs[sel].max()))
        k += 1
    d = np.asarray(edges)
    s = np.asarray(sups)
    good = s > 0
    if good.sum() < 2:
        return HolderFit(math.nan, math.nan, math.nan, math.nan, edges, sups, True,
                         "fewer than two distance bins with nonzero oscillation (constant field?)")
    x, y = np.log(d[good]), np.log(s[good])
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    if slope <= 0:
        return HolderFit(math.nan, math.exp(intercept), resid, float(slope), edges, sups, True,
                         "nonpositive log-log slope")
    return HolderFit(float(min(slope, 1.0)), float(math.exp(intercept)), resid, float(slope), edges, sups)


def central_gradient(grid: Grid, u) -> np.ndarray:
    """Central-difference gradient on interior nodes, shape ``(size, dim)``; zero on the boundary."""
    u = as_field(grid, u).reshape(grid.shape)
    out = np.zeros((grid.size, grid.dim))
    for k, h in enumerate(grid.spacing):
        g = np.zeros(grid.shape)
        inner = [slice(1, -1)] * grid.dim
        up = list(inner)
        down = list(inner)
        up[k] = slice(2, None)
        down[k] = slice(None, -2)
        g[tuple(inner)] = (u[tuple(up)] - u[tuple(down)]) / (2 * h)
        out[:, k] = g.reshape(-1)
    return out


@dataclass
class GradientHolder:
    exponent: float
    seminorm: float
    components: list
    contact_mismatch: Optional[float]
    flagged: bool


def gradient_holder(grid: Grid, u, partition: RegimePartition, eps: float, phi=None, psi=None,
                    max_dist: Optional[float] = None) -> GradientHolder:
    """Hölder fit of each central-difference gradient component over the nodes at distance > eps
    from the boundary, plus the largest ``|Du - D(obstacle)|`` on the contact nodes there."""
    region = grid.interior_subdomain(max(eps, max(grid.spacing) * (1 + 1e-9)))
    if region.sum() < 3:
        raise ValueError("interior subdomain is too small")
    Du = central_gradient(grid, u)
    fits = [holder_exponent(grid, Du[:, k], region, max_dist) for k in range(grid.dim)]
    good = [f for f in fits if not f.flagged]
    exponent = min((f.exponent for f in good), default=math.nan)
    seminorm = max((f.seminorm for f in good), default=math.nan)
    mismatch = None
    for mask, obstacle in ((partition.lower, phi), (partition.upper, psi)):
        if obstacle is None:
            continue
        sel = mask & region
        if sel.any():
            diff = np.linalg.norm(Du[sel] - central_gradient(grid, obstacle)[sel], axis=1)
            mismatch = max(mismatch or 0.0, float(diff.max()))
        elif mismatch is None:
            mismatch = 0.0
    return GradientHolder(exponent, seminorm, fits, mismatch, flagged=len(good) < len(fits))


# ---------------------------------------------------------------------------
# Harnack-type probes


@dataclass
class ProbeResult:
    ratio: float
    numerator: float
    denominator: float
    flagged: bool = False
    message: str = ""


def harnack_probe(grid: Grid, v, f, center, r: float, exponents: ExponentSet, eps0: float = 0.5,
                  mode: str = "weak") -> ProbeResult:
    """Ratio of the two sides of the weak Harnack (``mode="weak"``) or local maximum principle
    (``mode="lmp"``) inequality on ``B_r(center)``; the constants are what is measured.

    weak: ``||v||_{L^eps0(B_r)} / (r^(n/eps0) (inf_{B_r} v + r^alpha0 ||f||_{L^(p^n)(B_2r)}))``
    lmp:  ``sup_{B_r/2} v / (r^(-n/eps0) ||v||_{L^eps0(B_r)} + r^alpha0 ||f^+||_{L^(p^n)(B_2r)})``
    """
    v = as_field(grid, v)
    f = as_field(grid, f)
    if not eps0 > 0:
        raise ValueError("eps0 must be positive")
    center = np.atleast_1d(np.asarray(center, dtype=float))
    room = float(np.min(np.minimum(center - grid.lower, np.asarray(grid.upper) - center)))
    if 2 * r > room * (1 + 1e-12):
        raise ValueError("B_2r(center) is not contained in the domain")
    n = grid.dim
    big = grid.ball(center, 2 * r)
    ball = grid.ball(center, r)
    pn = exponents.p_wedge_n
    if mode == "weak":
        if np.any(v[big] < 0):
            raise ValueError("the weak Harnack probe needs v >= 0 on B_2r")
        num = lp_quasinorm(grid, v, eps0, ball)
        den = r ** (n / eps0) * (float(v[ball].min()) + r ** exponents.alpha0 * lp_quasinorm(grid, f, pn, big))
    elif mode == "lmp":
        num = float(v[grid.ball(center, r / 2)].max())
        den = (r ** (-n / eps0) * lp_quasinorm(grid, v, eps0, ball)
               + r ** exponents.alpha0 * lp_quasinorm(grid, np.maximum(f, 0), pn, big))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if den <= 0:
        return ProbeResult(math.inf, num, den, True, "denominator vanishes (Harnack-tight instance)")
    return ProbeResult(num / den, num, den)


def coefficient_oscillation(op: Operator, y: int, r: float, **theta_kw) -> float:
    """``(1/r) ||theta(y, .)||_{L^n(B_r(y))}`` from sampled theta values."""
    grid = op.grid
    ball = np.flatnonzero(grid.ball(grid.coords[y], r))
    theta = np.zeros(grid.size)
    for x in ball:
        theta[x] = theta_estimate(op, y, int(x), **theta_kw).value
    return lp_quasinorm(grid, theta, grid.dim, ball) / r
