import math

import numpy as np
import pytest

from bubbling.errors import BadProblem, DomainError
from bubbling.green import (default_chart_radius, discrete_mass, local_limit, mode_decay_diagnostic, quintic_cutoff,
                            refine, solve_regular_part)
from bubbling.grid import Grid2D, integrate
from bubbling.problem import CurvatureProblem, build_f


def green_for(beta, n, points=((0.5, 0.5),), **kw):
    f = build_f(list(points), beta, **kw)
    return solve_regular_part(CurvatureProblem(Grid2D(1.0, n), f, 1.0, 0.0), chart_fraction=0.45)


@pytest.fixture(scope="module")
def unit_green():
    return green_for(1.0, 128)


def test_quintic_cutoff_shape():
    r = np.linspace(0, 2, 201)
    eta, d1, d2 = quintic_cutoff(r, 0.5, 1.0)
    assert np.all(eta[r <= 0.5] == 1) and np.all(eta[r >= 1.0] == 0)
    assert np.all(np.diff(eta) <= 1e-15)
    # value, slope and curvature are continuous at both ends
    assert abs(d1[r <= 0.5]).max() == 0 and abs(d2[r >= 1.0]).max() == 0
    x = np.array([0.5 + 1e-7, 1.0 - 1e-7])
    e = quintic_cutoff(x, 0.5, 1.0)
    assert np.all(np.abs(e[1]) < 1e-5) and np.all(np.abs(e[2]) < 1e-2)


@pytest.mark.parametrize("beta", [1.0, 3.0])
def test_regular_part_at_the_point_matches_the_local_limit(beta):
    gf = green_for(beta, 128)
    expected = local_limit(gf.problem.hessians[0])
    assert expected == pytest.approx(-math.log(beta))
    assert gf.H_at_points[0] == pytest.approx(expected, abs=5e-4)


def test_mass_identity(unit_green):
    assert unit_green.mass_error < 1e-3
    # the discrete equation carries the identity exactly
    assert discrete_mass(unit_green) == pytest.approx(unit_green.mass_target, rel=1e-9)


def test_projected_source_integral(unit_green):
    assert integrate(unit_green.theta) == pytest.approx(-8 * math.pi, rel=1e-10)


def test_regular_part_error_shrinks_under_refinement(unit_green):
    finer = green_for(1.0, 256)
    assert abs(finer.H_at_points[0]) < abs(unit_green.H_at_points[0])


def test_refine_solves_on_the_new_grid(unit_green):
    fine = refine(unit_green, Grid2D(1.0, 256))
    assert fine.grid.n == 256
    assert fine.H_at_points[0] == pytest.approx(unit_green.H_at_points[0], abs=5e-4)
    assert refine(fine, fine.grid) is fine


def test_green_value_far_from_the_point_is_smooth(unit_green):
    x = np.array([[0.05, 0.05], [0.95, 0.95]])
    g = unit_green.G(x)
    assert g[0] == pytest.approx(g[1], abs=1e-10)


def test_two_points_share_the_regular_value():
    gf = green_for(2.0, 128, points=((0.25, 0.5), (0.75, 0.5)))
    assert gf.chart_radius == pytest.approx(0.25)
    assert gf.H_at_points[0] == pytest.approx(gf.H_at_points[1], abs=1e-10)
    assert gf.mass_error < 1e-2


def test_chart_radius_rules():
    prob = CurvatureProblem(Grid2D(1.0, 64), build_f([(0.2, 0.5), (0.6, 0.5)], 1.0))
    assert default_chart_radius(prob, 0.45) == pytest.approx(0.2)
    with pytest.raises(BadProblem):
        solve_regular_part(prob, chart_radius=0.6)


def test_overlapping_charts_rejected():
    prob = CurvatureProblem(Grid2D(1.0, 32), build_f([(0.5, 0.5)], 1.0))
    with pytest.raises(BadProblem):
        solve_regular_part(prob, chart_radius=0.1)


def test_mode_decay_of_an_anisotropic_well():
    gf = green_for(1.5, 256, anisotropy=[((1.0, 0.3), (0.3, 2.0))])
    R = 0.5 * gf.chart_radius
    rep = mode_decay_diagnostic(gf, gf.points[0], np.geomspace(0.02, 0.8 * R, 5))
    ok = rep.k_exponents[np.isfinite(rep.k_exponents)]
    assert ok.size >= 2
    assert np.all(ok[:2] <= -1.6)
    with pytest.raises(DomainError):
        mode_decay_diagnostic(gf, gf.points[0], [R])
