import math

import numpy as np
import pytest

from bubbling.errors import Diverged
from bubbling.grid import Grid2D
from bubbling.oracle import (BranchRecord, height_law, mass_identity_error, minimal_branch, newton,
                             scaled_residual, solutions_at, trace_fold)
from bubbling.problem import CurvatureProblem, build_f


@pytest.fixture(scope="module")
def problem():
    return CurvatureProblem(Grid2D(1.0, 32), build_f([(0.5, 0.5)], 1.5), 1.0, 0.0)


def test_unique_solution_at_zero_lambda(problem):
    a = newton(problem, np.zeros((32, 32)))
    b = newton(problem, np.ones((32, 32)))
    assert a.residual <= 1e-10 and b.residual <= 1e-10
    assert np.abs(a.u.values - b.u.values).max() < 1e-9


def test_solvability_identity(problem):
    u = newton(problem.with_lambda(0.2), np.zeros((32, 32))).u
    assert mass_identity_error(problem.with_lambda(0.2), u) < 1e-6


def test_divergence_guard(problem):
    with pytest.raises(Diverged):
        newton(problem, np.full((32, 32), 60.0), max_norm=50.0)


def test_minimal_branch_tends_to_the_zero_lambda_solution(problem):
    u0 = newton(problem, np.zeros((32, 32))).u.values
    rec = minimal_branch(problem, [0.0, 0.02, 0.05, 0.1, 0.2], keep_fields=True)
    dist = [np.abs(u - u0).max() for u in rec.fields]
    assert dist[0] < 1e-9
    assert np.all(np.diff(dist) > 0)
    assert all(p.curvature_identity < 5e-3 for p in rec.points)


def test_fold_and_two_solutions(problem):
    trace = trace_fold(problem, np.linspace(0, 0.35, 15))
    bound = math.sqrt(float(np.sum(problem.f_values)) * problem.grid.h**2)
    assert trace.fold is not None and trace.fold < bound
    assert trace.two_solutions
    lo, hi = trace.test_norms
    assert hi - lo > 2
    assert len(solutions_at(trace.continuation, trace.test_lambda)) >= 1
    pts = trace.minimal.points + trace.continuation.points
    assert all(p.curvature_identity < 5e-3 and p.residual <= 1e-9 for p in pts)


def test_branch_csv_round_trip(tmp_path, problem):
    rec = minimal_branch(problem, [0.0, 0.1])
    path = tmp_path / "b.csv"
    rec.write_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0].startswith("lambda,sup_norm,u_p1,residual,mass1,arclength")
    assert len(rows) == 3
    assert float(rows[2].split(",")[0]) == 0.1


def test_height_law_recovers_a_synthetic_law():
    lam = np.geomspace(0.02, 0.2, 7)
    u = -4 * np.log(lam) - 2 * np.log(np.log(1 / lam) / math.sqrt(2)) + 0.3
    fit = height_law(lam, u)
    assert fit.subdominant == -2.0
    assert fit.slope == pytest.approx(-4.0, abs=1e-10)
    assert fit.free_fit[0] == pytest.approx(-4.0, abs=1e-8)
    flipped = height_law(lam, -4 * np.log(lam) + 2 * np.log(np.log(1 / lam)))
    assert flipped.subdominant == 2.0


def test_height_law_needs_three_samples():
    with pytest.raises(ValueError):
        height_law([0.1, 0.2], [1.0, 2.0])


def test_scaled_residual_of_exact_constant_solution():
    # with f constant and alpha balancing, u = 0 solves the equation
    f = build_f([(0.5, 0.5)], 1.0, "zero")
    prob = CurvatureProblem(Grid2D(1.0, 16), f, 0.0, 0.0)
    assert scaled_residual(prob, np.zeros((16, 16))) == 0.0
    assert BranchRecord("empty").to_csv().startswith("lambda")
