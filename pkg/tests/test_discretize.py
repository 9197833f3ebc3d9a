from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obstacle.core import Grid, ProblemSpec, compute_exponents
from obstacle.discretize import (DiscreteOperator, assemble_residual, directional_second_difference,
                                 discretize_operator, mollify, shift_obstacles)
from obstacle.operators import (BellmanOperator, CustomOperator, LinearOperator, PucciOperator,
                                eval_operator)

from oracles import fd_jacobian

SQUARE = Grid.uniform((-1.0, -1.0), (1.0, 1.0), (9, 9))
LINE = Grid.uniform((-1.0,), (1.0,), (17,))


def operators_2d(grid=SQUARE):
    x = grid.coords
    return [
        LinearOperator(grid, 1.0),
        LinearOperator(grid, [[2.0, 0.5], [0.5, 1.0]], b=np.stack([np.sin(3 * x[:, 0]), x[:, 1]], -1)),
        BellmanOperator([LinearOperator(grid, 1.0, b=[1.0, 0.0]), LinearOperator(grid, [[2.0, -0.3], [-0.3, 1.5]])]),
        PucciOperator(grid, "+", 1.0, 2.0, mu=0.5),
        PucciOperator(grid, "-", 0.5, 3.0, mu=1.0),
    ]


def quadratic(grid, X, b=None):
    x = grid.coords
    b = np.zeros(grid.dim) if b is None else np.asarray(b)
    return 0.5 * np.einsum("ni,ij,nj->n", x, X, x) + x @ b


# -- second differences ---------------------------------------------------


def test_second_difference_examples():
    x1, x2 = SQUARE.coords.T
    node = SQUARE.nearest_node((0.25, -0.5))
    assert directional_second_difference(SQUARE, x1 ** 2, node, (1, 0)) == pytest.approx(2.0, abs=1e-12)
    assert directional_second_difference(SQUARE, 3 * x1 - x2, node, (1, 1)) == pytest.approx(0.0, abs=1e-12)
    assert directional_second_difference(SQUARE, x1 * x2, node, (1, 1)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        directional_second_difference(SQUARE, x1, 0, (1, 0))


def test_pucci_laplacian_of_paraboloid():
    op = PucciOperator(SQUARE, "+", 1.0, 1.0)
    u = 0.5 * np.sum(SQUARE.coords ** 2, axis=1)
    assert np.allclose(DiscreteOperator(op).evaluate(u), -2.0, atol=1e-12)


def test_three_point_stencil():
    grid = Grid.uniform((0.0,), (2.0,), (5,))
    st_ = DiscreteOperator(LinearOperator(grid, 1.0)).stencil(np.zeros(grid.size), 2)
    h = grid.h
    assert st_ == pytest.approx({(-1,): -1 / h ** 2, (0,): 2 / h ** 2, (1,): -1 / h ** 2})


@pytest.mark.parametrize("sign", ["+", "-"])
def test_gradient_term_on_linear_function(sign):
    mu = 0.7
    op = PucciOperator(SQUARE, sign, 1.0, 1.0, mu=mu)
    u = SQUARE.coords[:, 0]
    expected = mu if sign == "+" else -mu
    assert np.allclose(DiscreteOperator(op).evaluate(u), expected, atol=1e-12)


def test_drift_is_exact_on_linear_functions():
    b = np.array([0.4, -1.2])
    op = LinearOperator(SQUARE, 1.0, b=b)
    u = SQUARE.coords @ np.array([2.0, 3.0])
    assert np.allclose(DiscreteOperator(op).evaluate(u), b @ [2.0, 3.0], atol=1e-12)


# -- consistency ----------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), c=st.floats(-5, 5), k=st.integers(0, 48))
def test_consistency_on_axis_aligned_quadratics(a, c, k):
    X = np.diag([a, c])
    u = quadratic(SQUARE, X)
    node = int(SQUARE.interior[k])
    for op in (LinearOperator(SQUARE, [[2.0, 0.5], [0.5, 1.0]]), PucciOperator(SQUARE, "+", 1.0, 2.0),
               PucciOperator(SQUARE, "-", 1.0, 2.0)):
        want = eval_operator(op, node, X @ SQUARE.coords[node], X)
        assert discretize_operator(op, u, node) == pytest.approx(want, abs=1e-10 * (1 + abs(a) + abs(c)))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5))
def test_linear_scheme_exact_on_any_quadratic(a, b, c):
    X = np.array([[a, b], [b, c]])
    op = LinearOperator(SQUARE, [[2.0, 0.5], [0.5, 1.0]])
    F = DiscreteOperator(op).evaluate(quadratic(SQUARE, X))
    assert np.allclose(F, -np.sum(op.A[0] * X), atol=1e-10 * (1 + np.abs(X).max()))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5))
def test_wide_stencil_angular_error(a, b, c):
    # two frames (axes and diagonals) miss the eigenframe by at most pi/8
    X = np.array([[a, b], [b, c]])
    e = np.linalg.eigvalsh(X)
    bound = (2.0 - 1.0) * (e[1] - e[0]) * math.sin(math.pi / 8) ** 2 + 1e-10 * (1 + np.abs(X).max())
    for sign in "+-":
        op = PucciOperator(SQUARE, sign, 1.0, 2.0)
        F = DiscreteOperator(op).evaluate(quadratic(SQUARE, X))
        exact = eval_operator(op, 0, [0, 0], X)
        assert np.all(np.abs(F - exact) <= bound)


# -- monotonicity and linearization ----------------------------------------


@pytest.mark.parametrize("op", operators_2d())
def test_monotone_in_neighbors(op):
    rng = np.random.default_rng(0)
    disc = DiscreteOperator(op)
    for _ in range(200):
        u = rng.normal(size=SQUARE.size)
        row = rng.integers(disc.nodes.size)
        k = rng.integers(len(disc.directions))
        nb = (disc.plus if rng.random() < 0.5 else disc.minus)[k, row]
        v = u.copy()
        v[nb] += rng.exponential()
        assert disc.evaluate(v)[row] <= disc.evaluate(u)[row] + 1e-9 * (1 + np.abs(u).max() / SQUARE.h ** 2)


@pytest.mark.parametrize("op", operators_2d())
def test_jacobian_matches_finite_differences(op):
    rng = np.random.default_rng(1)
    disc = DiscreteOperator(op)
    u = rng.normal(size=SQUARE.size)
    _, J = disc.evaluate(u, jacobian=True)
    Jfd = fd_jacobian(disc.evaluate, u, disc.nodes, h=1e-7)
    assert np.allclose(J.toarray(), Jfd, atol=1e-4 * np.abs(Jfd).max())


def test_rejects_anisotropic_pucci_and_uncertified_custom():
    aniso = Grid.uniform((0.0, 0.0), (1.0, 2.0), (5, 5))
    with pytest.raises(ValueError, match="equal spacing"):
        DiscreteOperator(PucciOperator(aniso, "+", 1, 2))
    with pytest.raises(ValueError, match="scheme"):
        DiscreteOperator(CustomOperator(SQUARE, lambda x, xi, X: -np.trace(X), 1, 1))


# -- mollification --------------------------------------------------------


def test_mollify_constant_and_linear():
    g = Grid.uniform((0.0,), (1.0,), (101,))
    eps = 0.05
    away = g.interior_subdomain(eps)
    assert np.allclose(mollify(g, np.full(g.size, 3.0), eps)[away], 3.0)
    x = g.coords[:, 0]
    assert np.allclose(mollify(g, 2 * x - 1, eps)[away], (2 * x - 1)[away], atol=1e-12)
    g2 = Grid.uniform((0.0, 0.0), (1.0, 1.0), (41, 41))
    lin = g2.coords @ [1.0, -2.0]
    away2 = g2.interior_subdomain(0.1)
    assert np.allclose(mollify(g2, lin, 0.1)[away2], lin[away2], atol=1e-12)


def test_mollify_step_function():
    g = Grid.uniform((-1.0,), (1.0,), (201,))
    step = (g.coords[:, 0] > 0).astype(float)
    out = mollify(g, step, 0.1, "nearest")
    assert out.min() >= 0 and out.max() <= 1
    assert np.all(np.diff(out) >= -1e-15)


def test_mollify_below_spacing_warns():
    with pytest.warns(UserWarning):
        out = mollify(LINE, LINE.coords[:, 0], LINE.h / 2)
    assert np.array_equal(out, LINE.coords[:, 0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), eps=st.floats(0.25, 0.8), ext=st.sampled_from(["zero", "nearest"]))
def test_mollify_contraction(seed, eps, ext):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(2, SQUARE.size))
    diff = mollify(SQUARE, u, eps, ext) - mollify(SQUARE, v, eps, ext)
    assert np.abs(diff).max() <= np.abs(u - v).max() * (1 + 1e-12)


def test_shift_constants_and_linear():
    g = Grid.uniform((0.0,), (1.0,), (101,))
    phi_e, psi_e = shift_obstacles(g, np.zeros(g.size), np.ones(g.size), 0.05)
    assert np.allclose(phi_e, 0.0) and np.allclose(psi_e, 1.0)
    x = g.coords[:, 0]
    eps = 0.05
    phi_e, _ = shift_obstacles(g, x, x + 1, eps, sigma=eps)
    assert np.all(phi_e <= x) and np.all(phi_e >= x - 2 * eps - 1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31), eps=st.floats(0.05, 0.3), lip=st.floats(0.1, 5), gap=st.floats(0, 1))
def test_shift_ordering_chain(seed, eps, lip, gap):
    rng = np.random.default_rng(seed)
    g = Grid.uniform((-1.0,), (1.0,), (65,))
    steps = rng.uniform(-lip, lip, size=(2, g.size - 1)) * g.h
    phi = np.concatenate([[0.0], np.cumsum(steps[0])])
    psi = np.maximum(phi + gap, np.concatenate([[1.0], 1.0 + np.cumsum(steps[1])]))
    phi_e, psi_e = shift_obstacles(g, phi, psi, eps)
    assert np.all(phi_e <= phi) and np.all(phi <= psi) and np.all(psi <= psi_e)


# -- residual assembly ----------------------------------------------------


def _line_problem(phi=-1.0, psi=1.0, f=2.0, g=0.0):
    return ProblemSpec(LINE, LinearOperator(LINE, 1.0), f, phi, psi, g, compute_exponents(1, 2, 2, 0.5))


def test_residual_regimes():
    x = LINE.coords[:, 0]
    p = _line_problem()
    assert np.allclose(assemble_residual(p, 1 - x ** 2), 0.0, atol=1e-12)
    # concave obstacle touched everywhere: F_h - f > 0 but u - phi = 0
    phi = 0.5 * (1 - x ** 2)
    q = _line_problem(phi=phi, psi=10.0, f=0.0)
    assert np.allclose(assemble_residual(q, phi), 0.0, atol=1e-12)
    r = assemble_residual(p, np.zeros(LINE.size))
    assert np.all(r[LINE.boundary] == 0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), c=st.floats(-10, 10))
def test_residual_translation_consistent(seed, c):
    rng = np.random.default_rng(seed)
    phi = -1 + 0.1 * rng.random(LINE.size)
    psi = 1 - 0.1 * rng.random(LINE.size)
    u = rng.uniform(-1.2, 1.2, LINE.size)
    g = np.clip(u, phi, psi)
    u[LINE.boundary] = g[LINE.boundary]
    base = assemble_residual(_line_problem(phi, psi, 1.0, g), u)
    moved = assemble_residual(_line_problem(phi + c, psi + c, 1.0, g + c), u + c)
    assert np.allclose(base, moved, atol=1e-9 * (1 + abs(c)) / LINE.h ** 2)
