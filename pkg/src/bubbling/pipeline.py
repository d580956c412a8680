"""Stage functions shared by the command line and the experiment scripts.

Each stage takes a :class:`~bubbling.problem.RunConfig` and returns plain
results; timings are wall-clock seconds per stage.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .ansatz import Ansatz, AnsatzConfig, build
from .green import GreenFunction, mode_decay_diagnostic, solve_regular_part
from .linear import ProjectedSolver
from .oracle import NewtonResult, newton
from .problem import CurvatureProblem, RunConfig
from .reduction import ReducedState, VerificationReport, solve_reduced, verify_solution

GREEN_DEFAULT_N = 256


class Timer(dict):
    """Stage name -> seconds."""

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self[name] = self.get(name, 0.0) + time.perf_counter() - t0


def ansatz_config(cfg: RunConfig) -> AnsatzConfig:
    return AnsatzConfig(cutoff_inner=cfg.cutoff_inner, cutoff_outer=cfg.cutoff_outer,
                        resolution_gate=cfg.resolution_gate, delta_rule=cfg.delta_rule)


def green_grid_size(cfg: RunConfig) -> int:
    return cfg.green_n or min(cfg.n, GREEN_DEFAULT_N)


def compute_green(cfg: RunConfig, n: int | None = None) -> GreenFunction:
    """Green function on the ``green_n`` grid (``lambda`` is irrelevant here)."""
    problem = cfg.problem(lam=0.0, n=n or green_grid_size(cfg))
    problem.require_admissible()
    return solve_regular_part(problem, chart_fraction=cfg.chart_fraction)


def mode_decay(gf: GreenFunction, j: int = 0, count: int = 6):
    """Mode-decay report on ``count`` radii spread geometrically below ``gamma/2``."""
    R = 0.5 * gf.chart_radius
    h = gf.grid.h
    radii = np.geomspace(max(4 * h, 0.05 * R), 0.8 * R, count)
    return mode_decay_diagnostic(gf, gf.points[j], radii)


@dataclass
class Construction:
    problem: CurvatureProblem
    green: GreenFunction
    ansatz: Ansatz
    state: ReducedState
    report: VerificationReport
    timings: dict = field(default_factory=dict)

    @property
    def u(self):
        return self.state.u

    def summary(self) -> dict:
        st = self.state
        corr = st.correction
        return {
            "lambda": self.problem.lam,
            "n": self.problem.grid.n,
            "offsets": [list(map(float, k)) for k in st.offsets],
            "deltas": [float(d) for d in st.ansatz.deltas],
            "epsilons": [float(e) for e in st.ansatz.epsilons],
            "phi_max": float(np.max(np.abs(st.phi.values))),
            "theta": st.theta,
            "c": st.c.tolist(),
            "correction_iterations": corr.iterations,
            "contraction": corr.contraction,
            "projected_ratio": self.state.history[0]["projected_ratio"],
            "first_ratio": corr.first_ratio,
            "c_history": st.history,
            "verify": self.report.as_dict(),
            "mass_radius": 0.5 * self.green.chart_radius,
        }


def construct(cfg: RunConfig, *, lam: float | None = None, n: int | None = None,
              green: GreenFunction | None = None, timer: Timer | None = None) -> Construction:
    """Green function, ansatz, projected solver and reduced solve at one ``lambda``.

    Stage names in ``timer``: green, ansatz, linear, reduction, verify.
    """
    timer = Timer() if timer is None else timer
    problem = cfg.problem(lam=lam, n=n)
    problem.require_admissible()
    if green is None:
        with timer.stage("green"):
            green = compute_green(cfg)
    with timer.stage("ansatz"):
        ans = build(problem, green, config=ansatz_config(cfg))
    with timer.stage("linear"):
        solver = ProjectedSolver(ans, chi_radius=cfg.chi_radius, sigma=cfg.sigma)
    with timer.stage("reduction"):
        state = solve_reduced(problem, green, config=ansatz_config(cfg), base=ans, solver=solver,
                              tol=cfg.reduced_tol, fixed_point_tol=cfg.fixed_point_tol)
    with timer.stage("verify"):
        report = verify_solution(problem, state.u, radius=0.5 * green.chart_radius)
    return Construction(problem, green, ans, state, report, dict(timer))


def polish(construction: Construction, *, tol: float | None = None) -> NewtonResult:
    """Newton on the full discrete equation started from the constructed field."""
    return newton(construction.problem, construction.u.values, tol=tol or 1e-10)


def resolvable_grid(cfg: RunConfig, lam: float, delta_guess: float, *, n_min=128, n_max=2048) -> int:
    """Smallest power of two with ``lambda * delta >= gate * h``."""
    need = cfg.resolution_gate * cfg.side_length / (lam * delta_guess)
    n = n_min
    while n < need and n < n_max:
        n *= 2
    return n


def node_value(u, point) -> float:
    """Value of a grid field at the node nearest ``point``."""
    grid = u.grid
    idx = tuple(int(round(c / grid.h)) % grid.n for c in point)
    return float(u.values[idx])


def height_samples(cfg: RunConfig, lambdas, grids=None, *, green: GreenFunction | None = None):
    """Constructed solutions over ``lambdas``; returns ``(lambda, n, u(p1))`` rows."""
    green = green or compute_green(cfg)
    rows = []
    for i, lam in enumerate(lambdas):
        n = grids[i] if grids is not None else cfg.n
        con = construct(cfg, lam=lam, n=n, green=green)
        rows.append((float(lam), n, node_value(con.u, con.problem.points[0])))
    return rows


def bound_lambda0(problem: CurvatureProblem) -> float:
    """``sqrt(int f)``, the a priori upper bound on the fold parameter."""
    return math.sqrt(float(np.sum(problem.f_values)) * problem.grid.h**2)
