import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubbling.ansatz import build
from bubbling.errors import DomainError
from bubbling.green import solve_regular_part
from bubbling.grid import Grid2D
from bubbling.linear import ProjectedSolver, StarNorm, apply_L, kernel_fields, limit_operator_residual
from bubbling.problem import CurvatureProblem, build_f


@pytest.fixture(scope="module")
def solver():
    f = build_f([(0.5, 0.5)], 1.5)
    gf = solve_regular_part(CurvatureProblem(Grid2D(1.0, 128), f, 1.0, 0.0), chart_fraction=0.45)
    ans = build(CurvatureProblem(Grid2D(1.0, 256), f, 1.0, 0.14), gf)
    return ProjectedSolver(ans)


def test_star_norm_weight_floor():
    grid = Grid2D(1.0, 64)
    sn = StarNorm(grid, (np.array([0.5, 0.5]),), (0.01,))
    ones = np.ones((64, 64))
    # far from the point the weight is the floor eps^2
    assert sn(ones) == pytest.approx(1 / 0.01**2)


@given(st.floats(-100, 100).filter(lambda a: abs(a) > 1e-6), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_star_norm_is_absolutely_homogeneous(a, seed):
    grid = Grid2D(1.0, 32)
    sn = StarNorm(grid, (np.array([0.25, 0.5]), np.array([0.75, 0.5])), (0.02, 0.03))
    h = np.random.default_rng(seed).standard_normal((32, 32))
    assert sn(a * h) == pytest.approx(abs(a) * sn(h), rel=1e-12)


def test_star_norm_triangle_inequality(rng):
    grid = Grid2D(1.0, 32)
    sn = StarNorm(grid, (np.array([0.5, 0.5]),), (0.02,))
    for _ in range(10):
        a, b = rng.standard_normal((2, 32, 32))
        assert sn(a + b) <= sn(a) + sn(b) + 1e-9


def test_star_norm_checks_arguments():
    grid = Grid2D(1.0, 32)
    with pytest.raises(DomainError):
        StarNorm(grid, (np.zeros(2),), (0.1,), sigma=1.5)
    with pytest.raises(DomainError):
        StarNorm(grid, (np.zeros(2),), (0.1, 0.2))


@pytest.mark.parametrize("i", [0, 1, 2])
def test_kernel_discretisation_order(i):
    r1, r2 = limit_operator_residual(i, 257), limit_operator_residual(i, 513)
    assert math.log2(r1 / r2) >= 1.9


def test_projected_solution_is_orthogonal_to_the_kernels(solver, rng):
    g = rng.standard_normal((256, 256))
    sol = solver.solve(g)
    assert sol.residual < 1e-10
    assert np.abs(sol.constraints).max() < 1e-10 * np.abs(sol.phi.values).max()


def test_coefficients_are_recovered_by_testing(solver, rng):
    g = rng.standard_normal((256, 256))
    sol = solver.solve(g)
    assert np.allclose(solver.recover_coefficients(sol, g), sol.c, rtol=1e-6, atol=1e-12)


def test_chart_operator_matches_the_global_solve(solver, rng):
    ans = solver.ans
    g = rng.standard_normal((256, 256))
    sol = solver.solve(g)
    lhs = apply_L(ans, 0, sol.phi).values
    chi, z1, z2 = kernel_fields(ans)[0]
    c = sol.c[0]
    rhs = ans.chart_of(0, g) + c[0] * chi * z1 + c[1] * chi * z2
    assert np.abs(lhs - rhs).max() < 1e-8 * np.abs(rhs).max()


@given(st.floats(-5, 5), st.floats(-5, 5))
@settings(max_examples=10, deadline=None)
def test_projected_inverse_is_linear(solver, a, b):
    rng = np.random.default_rng(7)
    g1, g2 = rng.standard_normal((2, 256, 256))
    s1, s2 = solver.solve(g1).phi.values, solver.solve(g2).phi.values
    s = solver.solve(a * g1 + b * g2).phi.values
    assert np.abs(s - a * s1 - b * s2).max() <= 1e-8 * (1 + np.abs(s).max())


def test_zero_source_gives_zero(solver):
    sol = solver.solve(np.zeros((256, 256)))
    assert np.abs(sol.phi.values).max() == 0
    assert np.abs(sol.c).max() == 0


def test_estimate_ratio_for_the_approximation_error(solver):
    sol = solver.solve(solver.ans.residual())
    assert 0 < sol.ratio < 1
    info = solver.conditioning()
    assert info["direct"] and info["schur_condition"] < 1e6
