"""Glued first approximation around the concentration points.

Near each point ``p_j`` the approximation is a bubble of scale ``eps_j`` plus
a radial correction ``F_j`` that accounts for ``f`` vanishing quadratically at
``p_j``; away from the points it is the Green function.  The two are blended
with a C^2 cutoff on the annulus ``C1 delta_j <= |x - p_j| <= C2 delta_j``:

    U = sum_j eta_j u_j + (1 - sum_j eta_j) G.

Fields on the periodic grid are kept in the original variable.  A chart
quantity ``Q(y)`` with ``y = (x - p_j)/eps_j`` relates to its original-variable
counterpart by the factor ``eps_j^2`` (for Laplacian-type terms).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import BadProblem, BlowUp, DomainError, ResolutionError
from .green import GreenFunction, quintic_cutoff, refine
from .grid import Grid2D, ScalarField, laplacian_values
from .problem import CurvatureProblem
from .radial import BubbleConfig, RadialProfile, bubble, select_delta, solve_cell, solve_matched_cell

DELTA_RULES = ("matched", "closed-form")


@dataclass(frozen=True)
class AnsatzConfig:
    """Gluing parameters; cutoff radii are multiples of ``delta``."""

    cutoff_inner: float = 0.5
    cutoff_outer: float = 1.0
    resolution_gate: float = 4.0
    delta_rule: str = "matched"
    offset_bound: float = 10.0

    def __post_init__(self):
        if not (0 < self.cutoff_inner < self.cutoff_outer):
            raise DomainError("need 0 < cutoff_inner < cutoff_outer")
        if self.delta_rule not in DELTA_RULES:
            raise DomainError(f"delta_rule must be one of {DELTA_RULES}")
        if self.resolution_gate <= 0:
            raise DomainError("resolution_gate must be positive")


@dataclass(frozen=True, eq=False)
class BubbleCore:
    """Radial inner solution ``w + F`` about one point (``F`` in physical radius)."""

    config: BubbleConfig
    point: np.ndarray
    cell: RadialProfile
    expanded_cell: bool

    def correction(self, r):
        """``F(r)``; zero below the profile's floor."""
        r = np.asarray(r, dtype=float)
        t = np.log(np.maximum(r, 1e-300))
        if self.expanded_cell:
            t = t - math.log(self.config.epsilon)
        return self.cell(t)

    def radial(self, r):
        """Value of the inner solution at radius ``r`` for zero offset."""
        r = np.asarray(r, dtype=float)
        eps = self.config.epsilon
        return math.log(8.0 * self.config.delta**2) - 2.0 * np.log(eps * eps + r * r) + self.correction(r)

    def __call__(self, d):
        """Inner solution at displacements ``d`` from the point (trailing axis 2)."""
        d = np.asarray(d, dtype=float)
        r = np.hypot(d[..., 0], d[..., 1])
        return bubble(self.config, d) + self.correction(r)


def _angular_profile(f, p, r_max, samples=64, count=160):
    """Spline of ``fbar(r)/r^2`` in ``log r`` for the angular mean ``fbar`` about ``p``."""
    radii = np.geomspace(1e-7, r_max, count)
    th = 2 * math.pi * (np.arange(samples) + 0.5) / samples
    dirs = np.stack([np.cos(th), np.sin(th)], -1)
    vals = np.empty(count)
    j = next(i for i, q in enumerate(f.points) if np.allclose(q, p))
    for i, r in enumerate(radii):
        vals[i] = f.quotient(j, np.full(samples, r), dirs).mean()
    spline = CubicSpline(np.log(radii), vals)

    def weight(r):
        r = max(float(r), 1e-7)
        return r * r * float(spline(math.log(r)))

    return weight


def _circle_mean(green: GreenFunction, p, r, samples=128):
    th = 2 * math.pi * (np.arange(samples) + 0.5) / samples
    pts = np.asarray(p) + r * np.stack([np.cos(th), np.sin(th)], -1)
    return float(np.mean(green.G(pts)))


def match_delta(problem: CurvatureProblem, green: GreenFunction, j: int, lam: float,
                cfg: AnsatzConfig = AnsatzConfig(), H_at_p=None):
    """Scale ``delta`` for which the inner solution meets the angular mean of
    ``G`` at the middle of the gluing annulus.

    Returns ``(delta, cell_profile, mismatch)``.  The bracket starts around
    the value from ``select_delta`` and is widened if needed.
    """
    p = problem.points[j]
    d0 = select_delta(lam, green.H_at_points[j] if H_at_p is None else H_at_p)
    mid = 0.5 * (cfg.cutoff_inner + cfg.cutoff_outer)
    weight = _angular_profile(problem.f, p, 1.5 * cfg.cutoff_outer * 4 * d0)

    def inner(delta):
        r_max = 1.05 * cfg.cutoff_outer * delta
        cell = solve_matched_cell(lam, delta, weight, r_max)
        core = BubbleCore(BubbleConfig(lam, delta), np.asarray(p), cell, expanded_cell=False)
        return core, cell

    def mismatch(delta):
        try:
            core, _ = inner(delta)
        except BlowUp:
            # the correction overshoots before the annulus: delta is too large
            return 1e3
        r = mid * delta
        return float(core.radial(r)) - _circle_mean(green, p, r)

    lo, hi = 0.5 * d0, 2.0 * d0
    f_lo, f_hi = mismatch(lo), mismatch(hi)
    for _ in range(6):
        if f_lo * f_hi < 0:
            break
        if f_lo > 0:
            hi, f_hi = lo, f_lo
            lo *= 0.5
            f_lo = mismatch(lo)
        else:
            lo, f_lo = hi, f_hi
            hi *= 1.5
            f_hi = mismatch(hi)
    else:
        raise BadProblem(f"no matching bubble scale found near delta = {d0:.4g}")
    delta = brentq(mismatch, lo, hi, xtol=1e-14, rtol=1e-13)
    _, cell = inner(delta)
    return delta, cell, mismatch(delta)


@dataclass(eq=False)
class Ansatz:
    """Glued approximation ``U`` with its per-bubble data."""

    problem: CurvatureProblem
    green: GreenFunction
    bubbles: list
    cores: list
    U: ScalarField
    config: AnsatzConfig
    G_values: np.ndarray = field(repr=False)
    cutoffs: list = field(repr=False)
    matching: list = field(default_factory=list)

    @property
    def grid(self) -> Grid2D:
        return self.U.grid

    @property
    def points(self):
        return self.problem.points

    @property
    def lam(self) -> float:
        return self.problem.lam

    @property
    def epsilons(self):
        return [b.epsilon for b in self.bubbles]

    @property
    def deltas(self):
        return [b.delta for b in self.bubbles]

    @property
    def offsets(self):
        return [np.asarray(b.center_offset) for b in self.bubbles]

    @property
    def centers(self):
        """Bubble centres ``p_j + eps_j k_j`` (wrapped into the domain)."""
        L = self.grid.side_length
        return [np.mod(p + b.center, L) for p, b in zip(self.points, self.bubbles)]

    def potential(self) -> np.ndarray:
        """``(f - lambda^2) e^U``, the zeroth-order coefficient of the linearization."""
        return (self.problem.f_values - self.lam**2) * np.exp(self.U.values)

    def residual(self) -> np.ndarray:
        """``-(Delta U - (f - lambda^2) e^U + alpha)`` on the grid (original variable)."""
        U = self.U.values
        return -(laplacian_values(U, self.grid.h) - self.potential() + self.problem.alpha)

    def chart(self, j):
        """Expanded coordinates ``y = (x - p_j)/eps_j`` of every grid node."""
        dx, dy = self.grid.displacement(self.points[j])
        eps = self.bubbles[j].epsilon
        return np.stack([dx / eps, dy / eps], -1)

    def chart_of(self, j, phi) -> np.ndarray:
        """Rescale an original-variable source term to chart ``j``."""
        return self.bubbles[j].epsilon ** 2 * np.asarray(getattr(phi, "values", phi))

    def core_value(self, j) -> float:
        """Closed-form value of ``w + F`` at the bubble centre."""
        b = self.bubbles[j]
        return float(self.cores[j](b.center[None, :])[0])

    def with_offsets(self, offsets) -> "Ansatz":
        return build(self.problem, self.green, offsets, config=self.config, deltas=self.deltas,
                     cells=[c.cell for c in self.cores], G_values=self.G_values)


def build(problem: CurvatureProblem, green: GreenFunction, offsets=None, *, config: AnsatzConfig = AnsatzConfig(),
          deltas=None, cells=None, G_values=None) -> Ansatz:
    """Assemble the glued approximation on ``problem.grid``.

    ``green`` may live on a coarser grid; its remainder is interpolated.
    ``deltas``/``cells`` reuse scales and profiles from an earlier build
    (offset changes do not move them).
    """
    lam = problem.lam
    if not (0 < lam < 1):
        raise DomainError("the ansatz needs 0 < lambda < 1")
    grid = problem.grid
    h = grid.h
    npts = len(problem.points)
    offsets = [np.zeros(2)] * npts if offsets is None else [np.asarray(k, dtype=float) for k in offsets]
    if len(offsets) != npts:
        raise DomainError("one offset per bubble is required")
    gamma = green.chart_radius
    H_values = list(green.H_at_points)
    green = refine(green, grid)
    bubbles, cores, matching = [], [], []
    for j, p in enumerate(problem.points):
        if deltas is not None:
            delta, cell = deltas[j], cells[j]
            expanded = config.delta_rule == "closed-form"
            gap = float("nan")
        elif config.delta_rule == "closed-form":
            delta = select_delta(lam, H_values[j])
            eps = lam * delta
            try:
                cell = solve_cell(delta, math.log(1.05 * config.cutoff_outer * delta / eps))
            except BlowUp as exc:
                raise ResolutionError(f"cell profile blows up inside the gluing annulus: {exc}") from exc
            expanded, gap = True, float("nan")
        else:
            delta, cell, gap = match_delta(problem, green, j, lam, config, H_values[j])
            expanded = False
        eps = lam * delta
        if eps < config.resolution_gate * h:
            raise ResolutionError(
                f"bubble {j}: eps = {eps:.3g} is below {config.resolution_gate:g} mesh widths ({h:.3g}); "
                "refine the grid or raise lambda")
        if config.cutoff_outer * delta >= 0.5 * gamma:
            raise ResolutionError(
                f"bubble {j}: gluing annulus radius {config.cutoff_outer * delta:.3g} exceeds half the "
                f"Green chart radius {0.5 * gamma:.3g}; lower lambda")
        k = offsets[j]
        bound = config.offset_bound * lam / delta
        if np.hypot(*k) > bound:
            raise DomainError(f"offset |k_{j}| = {np.hypot(*k):.3g} exceeds the admissible {bound:.3g}")
        cfg = BubbleConfig(lam, delta, tuple(k), config.cutoff_inner * delta, config.cutoff_outer * delta)
        bubbles.append(cfg)
        cores.append(BubbleCore(cfg, np.asarray(p), cell, expanded))
        matching.append(gap)

    if G_values is None:
        G_values = green.G_on(grid)
    U = np.array(G_values, dtype=float)
    cutoffs = []
    for cfg, core, p in zip(bubbles, cores, problem.points):
        dx, dy = grid.displacement(p)
        r = np.hypot(dx, dy)
        mask = r < cfg.cutoff_outer
        eta = quintic_cutoff(r[mask], cfg.cutoff_inner, cfg.cutoff_outer)[0]
        inner = core(np.stack([dx[mask], dy[mask]], -1))
        outer = np.where(eta < 1.0, U[mask], 0.0)
        U[mask] = eta * inner + (1.0 - eta) * outer
        cutoffs.append((mask, eta))
    ans = Ansatz(problem, green, bubbles, cores, ScalarField(grid, U), config, G_values, cutoffs, [])
    ans.matching = [_matching_report(ans, j, gap) for j, gap in enumerate(matching)]
    return ans


def _matching_report(ans: Ansatz, j, gap):
    """Largest ``|u_j - G|`` on the inner cutoff circle, plus the fitted mismatch."""
    cfg = ans.bubbles[j]
    p = ans.points[j]
    th = 2 * math.pi * (np.arange(128) + 0.5) / 128
    d = cfg.cutoff_inner * np.stack([np.cos(th), np.sin(th)], -1)
    inner = ans.cores[j](d)
    outer = ans.green.G(np.asarray(p) + d)
    return {"inner_circle_max": float(np.max(np.abs(inner - outer))), "mean_mismatch": gap}


def expanded_error(ans: Ansatz, j: int, sigma: float = 0.5):
    """Error of the approximation in chart ``j``: ``eps_j^2`` times the
    original-variable residual, and its star norm over that chart."""
    from .linear import StarNorm

    E = ans.chart_of(j, ans.residual())
    sn = StarNorm.for_ansatz(ans, sigma)
    return ScalarField(ans.grid, E), sn.chart_norm(E, j)


def pure_bubble_residual(grid: Grid2D, cfg: BubbleConfig, point) -> np.ndarray:
    """Chart residual ``eps^2 (Delta w + lambda^2 e^w)`` of a lone bubble on ``grid``."""
    dx, dy = grid.displacement(point)
    w = bubble(cfg, np.stack([dx, dy], -1))
    return cfg.epsilon**2 * (laplacian_values(w, grid.h) + cfg.lam**2 * np.exp(w))
