import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubbling.errors import BadPoints, BadProblem, ConfigError
from bubbling.grid import Grid2D
from bubbling.problem import (CurvatureProblem, RunConfig, build_f, config_to_text, load_config, parse_config,
                              validate)


def fd_hessian(f, p, s=1e-4):
    p = np.asarray(p, dtype=float)
    H = np.empty((2, 2))
    e = np.eye(2) * s
    for i in range(2):
        for j in range(2):
            H[i, j] = (f((p + e[i] + e[j])[None])[0] - f((p + e[i] - e[j])[None])[0]
                       - f((p - e[i] + e[j])[None])[0] + f((p - e[i] - e[j])[None])[0]) / (4 * s * s)
    return H


def test_centred_unit_well_has_hessian_two_identity():
    f = build_f([(0.5, 0.5)], 1.0)
    assert np.allclose(f.hessian(0), 2 * np.eye(2))


@pytest.mark.parametrize("family", ["product-of-wells", "radial"])
def test_analytic_hessian_matches_differences(family):
    f = build_f([(0.3, 0.4), (0.8, 0.9)], 2.0, family, anisotropy=None if family == "radial" else
                [((1.0, 0.2), (0.2, 0.5)), None], tilt=None if family == "radial" else [(0.3, -0.2), None])
    for j, p in enumerate(f.points):
        assert np.allclose(f.hessian(j), fd_hessian(f, p), rtol=1e-5, atol=1e-6)


def test_hessian_differences_converge_at_second_order():
    f = build_f([(0.5, 0.5)], 1.5, anisotropy=[((1.0, 0.3), (0.3, 2.0))], tilt=[(0.5, 0.25)])
    p = f.points[0]
    errs = [np.abs(fd_hessian(f, p, s) - f.hessian(0)).max() for s in (4e-2, 2e-2)]
    assert math.log2(errs[0] / errs[1]) >= 1.9


def test_sampled_f_is_nonnegative_and_vanishes_at_the_zeros():
    f = build_f([(0.25, 0.5), (0.75, 0.5)], 3.0)
    prob = CurvatureProblem(Grid2D(1.0, 512), f)
    assert prob.f_values.min() >= 0.0
    assert all(f(p[None])[0] <= 1e-12 for p in f.points)


def test_two_antipodal_wells_are_swap_symmetric():
    grid = Grid2D(1.0, 64)
    a = build_f([(0.25, 0.5), (0.75, 0.5)], 2.0).on_grid(grid)
    b = build_f([(0.75, 0.5), (0.25, 0.5)], 2.0).on_grid(grid)
    assert np.allclose(a, b, rtol=1e-14, atol=0)
    # the swap is also a half-period shift of the torus
    assert np.allclose(a, np.roll(a, 32, axis=0), rtol=1e-12, atol=1e-15)


def test_close_points_are_rejected():
    with pytest.raises(BadPoints):
        build_f([(0.5, 0.5), (0.55, 0.5)], 1.0)


def test_large_tilt_rejected():
    with pytest.raises(BadProblem):
        build_f([(0.5, 0.5)], 1.0, tilt=[(5.0, 5.0)])


def test_isotropic_ratio_tends_to_one():
    f = build_f([(0.5, 0.5)], 1.0)
    prob = CurvatureProblem(Grid2D(1.0, 64), f)
    ratios = [validate(prob, g).ratios[0] for g in (0.2, 0.1, 0.05)]
    assert ratios[0] > ratios[1] > ratios[2] > 1.0
    assert ratios[2] - 1 < 0.01


def test_anisotropic_ratio_tends_to_four():
    f = build_f([(0.5, 0.5)], 1.0, anisotropy=[((0.5, 0.0), (0.0, 2.0))])
    prob = CurvatureProblem(Grid2D(1.0, 64), f)
    assert np.allclose(np.linalg.eigvalsh(f.hessian(0)), [1.0, 4.0])
    ratios = [validate(prob, g).ratios[0] for g in (0.2, 0.05)]
    assert abs(ratios[1] - 4) < abs(ratios[0] - 4)
    assert ratios[1] == pytest.approx(4.0, rel=0.02)


def test_zero_curvature_fails_the_checklist():
    f = build_f([(0.5, 0.5)], 1.0, "zero")
    rep = validate(CurvatureProblem(Grid2D(1.0, 32), f))
    assert not rep.checklist["f_not_identically_zero"]
    assert not rep.ok


def test_admissibility_check():
    f = build_f([(0.5, 0.5)], 1.0)
    CurvatureProblem(Grid2D(1.0, 32), f).require_admissible()
    with pytest.raises(BadProblem):
        CurvatureProblem(Grid2D(1.0, 32), build_f([(0.5, 0.5)], 1.0, "zero")).require_admissible()


def test_problem_rejects_negative_lambda():
    with pytest.raises(BadProblem):
        CurvatureProblem(Grid2D(1.0, 32), build_f([(0.5, 0.5)]), 1.0, -0.1)


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("n = 64\ncolour = blue\n")


def test_malformed_values():
    with pytest.raises(ConfigError):
        parse_config("n = sixty-four\n")
    with pytest.raises(ConfigError):
        parse_config("points = 0.5\n")
    with pytest.raises(ConfigError):
        parse_config("just some words\n")


def test_comments_aliases_and_groups():
    cfg = parse_config("# header\nlambda = 0.1  # trailing\nL = 2\npoints = 0.5 0.5; 1.5 1.0\n")
    assert cfg.lam == 0.1 and cfg.side_length == 2.0
    assert cfg.points == ((0.5, 0.5), (1.5, 1.0))


finite = st.floats(0.01, 10, allow_nan=False)


@given(n=st.sampled_from([32, 64, 128]), lam=st.floats(0.001, 0.9), beta=finite,
       pts=st.lists(st.tuples(st.floats(0, 0.99), st.floats(0, 0.99)), min_size=1, max_size=3),
       grid=st.lists(st.floats(0.001, 0.5), max_size=4))
@settings(max_examples=50)
def test_config_round_trip(n, lam, beta, pts, grid):
    cfg = RunConfig(n=n, lam=lam, beta=beta, points=tuple(pts), lambda_grid=tuple(grid))
    back = parse_config(config_to_text(cfg))
    assert back == cfg


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.cfg"))
    assert files
    for path in files:
        cfg = load_config(path)
        cfg.problem(n=32).require_admissible()
