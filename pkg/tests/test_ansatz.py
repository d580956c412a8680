import math

import numpy as np
import pytest

from bubbling.ansatz import AnsatzConfig, build, expanded_error, pure_bubble_residual
from bubbling.errors import DomainError, ResolutionError
from bubbling.green import solve_regular_part
from bubbling.grid import Grid2D, sample
from bubbling.problem import CurvatureProblem, build_f
from bubbling.radial import BubbleConfig, select_delta


@pytest.fixture(scope="module")
def setup():
    f = build_f([(0.5, 0.5)], 1.5)
    gf = solve_regular_part(CurvatureProblem(Grid2D(1.0, 128), f, 1.0, 0.0), chart_fraction=0.45)
    prob = CurvatureProblem(Grid2D(1.0, 256), f, 1.0, 0.14)
    return prob, gf, build(prob, gf)


def test_matched_scale_stays_near_the_closed_form_rule(setup):
    prob, gf, ans = setup
    d0 = select_delta(0.14, gf.H_at_points[0])
    assert abs(ans.deltas[0] / d0 - 1) < 0.25
    assert abs(ans.matching[0]["mean_mismatch"]) < 1e-10


def test_inner_and_outer_agree_on_the_gluing_annulus(setup):
    _, _, ans = setup
    assert ans.matching[0]["inner_circle_max"] < 0.3


def test_ansatz_is_the_bubble_near_the_centre(setup):
    _, _, ans = setup
    b = ans.bubbles[0]
    expected = math.log(8 * b.delta**2) - 4 * math.log(b.epsilon)
    assert ans.core_value(0) == pytest.approx(expected, abs=1e-6)
    assert sample(ans.U, np.asarray(ans.points[0])) == pytest.approx(ans.core_value(0), abs=1e-9)


def test_ansatz_equals_green_outside_the_annulus(setup):
    _, gf, ans = setup
    x = np.array([0.5 + 0.4, 0.5])
    assert sample(ans.U, x) == pytest.approx(float(gf.G(x[None])[0]), abs=1e-3)


def test_residual_is_localised(setup):
    prob, _, ans = setup
    E = ans.residual()
    d = prob.grid.distance(prob.points[0])
    outer = np.abs(E[d > 2 * ans.bubbles[0].cutoff_outer]).max()
    inner = np.abs(E[d < ans.bubbles[0].cutoff_outer]).max()
    # outside the bubble only the O(1) term (f - lambda^2) e^G survives
    assert outer < 0.05 * inner


def test_expanded_error_is_finite(setup):
    _, _, ans = setup
    E, norm = expanded_error(ans, 0)
    assert np.isfinite(norm) and norm > 0
    assert E.values.shape == (256, 256)


def test_offsets_move_the_centre(setup):
    _, _, ans = setup
    moved = ans.with_offsets([np.array([0.5, -0.25])])
    assert np.allclose(moved.centers[0] - ans.points[0], ans.epsilons[0] * np.array([0.5, -0.25]))
    assert moved.deltas == ans.deltas


def test_offset_bound(setup):
    _, _, ans = setup
    with pytest.raises(DomainError):
        ans.with_offsets([np.array([50.0, 0.0])])


def test_resolution_gate(setup):
    prob, gf, _ = setup
    with pytest.raises(ResolutionError):
        build(prob.with_lambda(0.02), gf)


def test_closed_form_rule_builds(setup):
    prob, gf, _ = setup
    ans = build(prob, gf, config=AnsatzConfig(delta_rule="closed-form"))
    assert ans.deltas[0] == pytest.approx(select_delta(0.14, gf.H_at_points[0]))


def test_bad_config_rejected():
    with pytest.raises(DomainError):
        AnsatzConfig(cutoff_inner=1.0, cutoff_outer=0.5)
    with pytest.raises(DomainError):
        AnsatzConfig(delta_rule="guess")


@pytest.mark.parametrize("n", [128, 256])
def test_pure_bubble_residual_is_second_order(n):
    cfg = BubbleConfig(0.2, 0.15)

    def interior_max(grid):
        # the lone bubble is not periodic, so stay clear of the wrap seam
        r = pure_bubble_residual(grid, cfg, (0.5, 0.5))
        return np.abs(r[grid.distance((0.5, 0.5)) < 0.3]).max()

    r1 = interior_max(Grid2D(1.0, n))
    r2 = interior_max(Grid2D(1.0, 2 * n))
    assert math.log2(r1 / r2) > 1.8
