"""Nonlinear correction, the reduced equations for the bubble offsets and
verification of assembled solutions.

The correction ``phi`` solves the projected fixed point

    phi = T(E + N(phi)),   N(phi) = (f - lambda^2) e^U (e^phi - 1 - phi),

in the original variable, where ``T`` is the projected inverse of
:mod:`bubbling.linear`.  The offsets ``k_j`` are then tuned until the
projection coefficients ``c(k)`` vanish, at which point ``U + phi`` solves the
discrete equation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ansatz import Ansatz, AnsatzConfig, build
from .errors import DomainError, NoContraction, NoConvergence, ReducedSolveFailed
from .green import GreenFunction
from .grid import ScalarField, laplacian_values, sample
from .linear import ProjectedSolver, StarNorm
from .problem import CurvatureProblem

log = logging.getLogger(__name__)

EIGHT_PI = 8.0 * math.pi


def nonlinear_global(ans: Ansatz, phi) -> np.ndarray:
    """``(f - lambda^2) e^U (e^phi - 1 - phi)`` in the original variable."""
    phi = np.asarray(getattr(phi, "values", phi), dtype=float)
    return ans.potential() * (np.expm1(phi) - phi)


def nonlinear_term(ans: Ansatz, j: int, phi) -> ScalarField:
    """Quadratic remainder of the equation about ``U``, scaled to chart ``j``."""
    return ScalarField(ans.grid, ans.chart_of(j, nonlinear_global(ans, phi)))


@dataclass
class Correction:
    """Converged fixed point ``phi = T(E + N(phi))``."""

    phi: ScalarField
    c: np.ndarray
    iterations: int
    increments: list
    factors: list
    theta: float
    solver: ProjectedSolver = field(repr=False)
    first_ratio: float = float("nan")

    @property
    def contraction(self) -> float:
        """Largest ratio of successive increments (nan with fewer than two steps)."""
        return max(self.factors) if self.factors else float("nan")


def _theta(ans: Ansatz, phi_max: float) -> float:
    eps = min(ans.epsilons)
    return phi_max / (eps * math.log(1.0 / eps))


def solve_correction(ans: Ansatz, *, solver: ProjectedSolver | None = None, phi0=None, source=None,
                     tol=1e-10, maxiter=50, stall=0.9, stall_steps=3) -> Correction:
    """Picard iteration ``phi <- T(E + N(phi))`` from ``phi0`` (zero by default).

    ``source`` replaces the approximation error ``E``; the fixed point of a
    zero source is zero.  After the first step only the change of the source
    is solved for, ``phi_{m+1} = phi_m + T(N(phi_m) - N(phi_{m-1}))``, with an
    inner tolerance matched to the expected size of the increment; the
    iterates are the same as for full solves.
    """
    solver = solver or ProjectedSolver(ans)
    E = ans.residual() if source is None else np.asarray(getattr(source, "values", source), dtype=float)
    phi = np.zeros((ans.grid.n, ans.grid.n)) if phi0 is None else np.array(getattr(phi0, "values", phi0), dtype=float)
    increments, factors = [], []
    bad = 0
    n_prev = nonlinear_global(ans, phi)
    sol = solver.solve(E + n_prev)
    first_ratio = sol.ratio
    c = sol.c
    for it in range(1, maxiter + 1):
        if it > 1:
            n_new = nonlinear_global(ans, phi)
            expected = increments[-1] * (factors[-1] if factors else 0.5)
            rtol = min(max(1e-2 * tol / max(expected, 1e-300), 1e-11), 1e-4)
            sol = solver.solve(n_new - n_prev, rtol=rtol)
            n_prev = n_new
            c = c + sol.c
            dphi = sol.phi.values
        else:
            dphi = sol.phi.values - phi
        step = float(np.max(np.abs(dphi)))
        phi = phi + dphi
        if not np.all(np.isfinite(phi)):
            raise NoConvergence("correction became non-finite", increments)
        if increments and increments[-1] > 0:
            q = step / increments[-1]
            factors.append(q)
            bad = bad + 1 if q > stall else 0
            if bad >= stall_steps:
                raise NoContraction(f"contraction factor above {stall} for {stall_steps} steps", increments + [step])
        increments.append(step)
        log.debug("correction step %d: |dphi| = %.3e", it, step)
        if step <= tol:
            phi_max = float(np.max(np.abs(phi)))
            return Correction(ScalarField(ans.grid, phi), c, it, increments, factors,
                              _theta(ans, phi_max), solver, first_ratio)
    raise NoConvergence(f"correction did not converge in {maxiter} iterations", increments)


@dataclass
class ReducedState:
    """Outcome of the reduced solve: offsets, correction and assembled ``u``."""

    offsets: list
    phi: ScalarField
    c: np.ndarray
    history: list
    u: ScalarField
    ansatz: Ansatz = field(repr=False)
    correction: Correction = field(repr=False)
    jacobian: np.ndarray | None = None

    @property
    def theta(self) -> float:
        return self.correction.theta

    @property
    def max_c(self) -> float:
        return float(np.max(np.abs(self.c)))


class _CoefficientMap:
    """``k -> c(k)`` with warm-started corrections.

    A solver built for the base offsets is reused whenever ``k`` equals them
    exactly; any other ``k`` changes the operator and gets a fresh one.
    """

    def __init__(self, base: Ansatz, correction_kwargs, solver=None):
        self.base = base
        self.kwargs = correction_kwargs
        self.k0 = np.concatenate([np.asarray(o, dtype=float) for o in base.offsets])
        self.solver = solver
        self.phi = None
        self.evaluations = 0

    def __call__(self, flat_k):
        flat_k = np.asarray(flat_k, dtype=float)
        k = flat_k.reshape(-1, 2)
        same = np.array_equal(flat_k, self.k0)
        ans = self.base if same else self.base.with_offsets(list(k))
        solver = self.solver if same else None
        corr = solve_correction(ans, solver=solver, phi0=self.phi, **self.kwargs)
        if same:
            self.solver = corr.solver
        self.phi = corr.phi.values
        self.evaluations += 1
        return corr.c.ravel(), ans, corr


def _fd_jacobian(cmap: _CoefficientMap, k, steps):
    k = np.asarray(k, dtype=float)
    J = np.empty((k.size, k.size))
    phi_keep = cmap.phi
    for i in range(k.size):
        e = np.zeros_like(k)
        e[i] = steps[i]
        cp = cmap(k + e)[0]
        cmap.phi = phi_keep
        cm = cmap(k - e)[0]
        cmap.phi = phi_keep
        J[:, i] = (cp - cm) / (2 * steps[i])
    return J


def solve_reduced(problem: CurvatureProblem, green: GreenFunction, *, config: AnsatzConfig = AnsatzConfig(),
                  offsets=None, tol=1e-8, max_steps=25, ball=5.0, base: Ansatz | None = None,
                  solver: ProjectedSolver | None = None, fixed_point_tol=1e-10,
                  **correction_kwargs) -> ReducedState:
    """Find offsets with ``c(k) = 0`` by a damped quasi-Newton iteration.

    The Jacobian is a centred difference with step ``0.1 lambda/delta_j`` per
    component, refreshed by Broyden updates.  Steps are confined to the ball
    ``|k_j| <= ball * lambda/delta_j`` and halved until ``|c|`` decreases.
    ``solver`` may carry a projected solver already built for ``base``.
    """
    for H in problem.hessians:
        if np.min(np.linalg.eigvalsh(H)) <= 0:
            raise DomainError("every Hessian must be positive definite")
    base = base or build(problem, green, offsets, config=config)
    lam = problem.lam
    radii = np.repeat([ball * lam / d for d in base.deltas], 2)
    steps = np.repeat([0.1 * lam / d for d in base.deltas], 2)
    cmap = _CoefficientMap(base, {"tol": fixed_point_tol, **correction_kwargs}, solver)
    k = np.concatenate([np.asarray(o, dtype=float) for o in base.offsets])
    c, ans, corr = cmap(k)
    history = [{"k": k.tolist(), "max_c": float(np.max(np.abs(c))), "iterations": corr.iterations,
                "contraction": corr.contraction, "projected_ratio": corr.first_ratio}]
    J = None
    for _ in range(max_steps):
        if np.max(np.abs(c)) <= tol:
            break
        if J is None:
            J = _fd_jacobian(cmap, k, steps)
        try:
            dk = -np.linalg.solve(J, c)
        except np.linalg.LinAlgError as exc:
            raise ReducedSolveFailed("singular reduced Jacobian", float(np.max(np.abs(c))), history) from exc
        accepted = False
        for _ in range(8):
            k_new = k + dk
            per = np.hypot(k_new[0::2], k_new[1::2])
            if np.any(per > radii[0::2]):
                dk = dk * 0.5
                continue
            c_new, ans_new, corr_new = cmap(k_new)
            if np.max(np.abs(c_new)) < np.max(np.abs(c)):
                accepted = True
                break
            dk = dk * 0.5
        if not accepted:
            raise ReducedSolveFailed("line search failed to reduce |c|", float(np.max(np.abs(c))), history)
        y = c_new - c
        J = J + np.outer(y - J @ dk, dk) / (dk @ dk)
        k, c, ans, corr = k_new, c_new, ans_new, corr_new
        history.append({"k": k.tolist(), "max_c": float(np.max(np.abs(c))), "iterations": corr.iterations,
                        "contraction": corr.contraction, "projected_ratio": corr.first_ratio})
    else:
        if np.max(np.abs(c)) > tol:
            raise ReducedSolveFailed(f"|c| = {np.max(np.abs(c)):.3e} after {max_steps} steps",
                                     float(np.max(np.abs(c))), history)
    offsets = [k[2 * j:2 * j + 2].copy() for j in range(len(base.bubbles))]
    u = ScalarField(ans.grid, ans.U.values + corr.phi.values)
    return ReducedState(offsets, corr.phi, c.reshape(-1, 2), history, u, ans, corr, J)


def offset_jacobian(ans: Ansatz, *, step_fraction=0.1, **correction_kwargs) -> np.ndarray:
    """Centred-difference ``dc/dk`` at the offsets of ``ans``."""
    cmap = _CoefficientMap(ans, correction_kwargs)
    k = np.concatenate([np.asarray(o, dtype=float) for o in ans.offsets])
    cmap(k)
    steps = np.repeat([step_fraction * ans.lam / d for d in ans.deltas], 2)
    return _fd_jacobian(cmap, k, steps)


def _polar_rule(radius, n_r=400, n_t=64):
    x, w = np.polynomial.legendre.leggauss(n_r)
    # split at |y| = 1 so the kink of 1/(1+|y|) sits on a panel edge
    panels = [(0.0, min(1.0, radius))] + ([(1.0, radius)] if radius > 1 else [])
    rs, ws = [], []
    for a, b in panels:
        rs.append(0.5 * (b - a) * x + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * w)
    r = np.concatenate(rs)
    wr = np.concatenate(ws)
    t = 2 * math.pi * np.arange(n_t) / n_t
    R, T = np.meshgrid(r, t, indexing="ij")
    W = (wr * r)[:, None] * (2 * math.pi / n_t) * np.ones_like(T)
    return R * np.cos(T), R * np.sin(T), W


def odd_moments(radius: float) -> dict:
    """Disk integrals of ``y1, y1 y2, y1^3, y1 y2^2`` against ``(1+|y|)^-1 (1+|y|^2)^-2``."""
    y1, y2, W = _polar_rule(radius)
    rho = np.hypot(y1, y2)
    base = W / ((1 + rho) * (1 + rho**2) ** 2)
    return {"y1": float(np.sum(y1 * base)), "y1y2": float(np.sum(y1 * y2 * base)),
            "y1^3": float(np.sum(y1**3 * base)), "y1y2^2": float(np.sum(y1 * y2**2 * base))}


def reduced_integral(radius: float = math.inf) -> float:
    """``int y1^2 / ((1+|y|)(1+|y|^2)^2)`` over the disk (unit constants)."""
    from scipy.integrate import quad

    # angular integral of cos^2 is pi
    def g(r):
        return math.pi * r**3 / ((1 + r) * (1 + r * r) ** 2)

    total = quad(g, 0, 1)[0] + quad(g, 1, math.inf)[0]
    if math.isinf(radius):
        return total
    # the tail is small and smooth; integrating it avoids quad missing the bulk
    return total - quad(g, max(radius, 1.0), math.inf)[0] - (quad(g, radius, 1)[0] if radius < 1 else 0.0)


def jacobian_structure(J: np.ndarray, hessian: np.ndarray, delta: float) -> dict:
    """Compare a ``2 x 2`` block of ``dc/dk`` with ``s * delta^2 * D^2 f``.

    ``s`` is the least-squares scalar; ``relative_misfit`` is the Frobenius
    misfit relative to ``|J|``.
    """
    J = np.asarray(J, dtype=float)
    model = delta**2 * np.asarray(hessian, dtype=float)
    s = float(np.sum(J * model) / np.sum(model * model))
    misfit = float(np.linalg.norm(J - s * model) / np.linalg.norm(J))
    sym = 0.5 * (J + J.T)
    return {"scale": s, "relative_misfit": misfit, "eigenvalues": np.linalg.eigvalsh(sym).tolist(),
            "positive_definite": bool(np.all(np.linalg.eigvalsh(sym) > 0))}


@dataclass
class VerificationReport:
    residual: float
    relative_residual: float
    masses: list
    mass_errors: list
    profile_error: float
    profile_error_core: float
    mass_identity: float
    curvature_identity: float
    deltas: list
    tolerances: dict = field(default_factory=dict)

    @property
    def checks(self) -> dict:
        t = self.tolerances
        return {"residual": self.relative_residual <= t.get("residual", 1e-6),
                "mass_identity": self.mass_identity <= t.get("identity", 5e-3),
                "curvature_identity": self.curvature_identity <= t.get("identity", 5e-3)}

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def as_dict(self) -> dict:
        return {"residual": self.residual, "relative_residual": self.relative_residual,
                "masses": self.masses, "mass_errors": self.mass_errors,
                "profile_error": self.profile_error, "profile_error_core": self.profile_error_core,
                "mass_identity": self.mass_identity, "curvature_identity": self.curvature_identity,
                "deltas": self.deltas, "checks": self.checks, "ok": self.ok}


def equation_residual(problem: CurvatureProblem, u) -> np.ndarray:
    u = np.asarray(getattr(u, "values", u), dtype=float)
    return laplacian_values(u, problem.grid.h) - (problem.f_values - problem.lam**2) * np.exp(u) + problem.alpha


def gradient_weight_integral(u: np.ndarray, h: float) -> float:
    """Summation-by-parts form of ``int |grad u|^2 e^{-u}``.

    Equals ``h^2 sum (Delta_h u) e^{-u}`` exactly on the periodic grid.
    """
    g = np.exp(-u)
    total = 0.0
    for axis in (0, 1):
        du = np.roll(u, -1, axis) - u
        dg = np.roll(g, -1, axis) - g
        total -= float(np.sum(du * dg))
    return total


def bubble_masses(problem: CurvatureProblem, u, radius: float, points=None) -> list:
    u = np.asarray(getattr(u, "values", u), dtype=float)
    grid = problem.grid
    out = []
    for p in points if points is not None else problem.points:
        mask = grid.distance(p) < radius
        out.append(float(problem.lam**2 * np.sum(np.exp(u[mask])) * grid.h**2))
    return out


def verify_solution(problem: CurvatureProblem, u, *, radius=None, deltas=None, points=None,
                    tolerances=None) -> VerificationReport:
    """Residual, bubble masses, rescaled profiles and the two integral identities."""
    field_ = u if isinstance(u, ScalarField) else ScalarField(problem.grid, np.asarray(u, dtype=float))
    uv = field_.values
    grid = problem.grid
    h2 = grid.h**2
    lam = problem.lam
    points = list(points) if points is not None else list(problem.points)
    if radius is None:
        sep = min((grid.periodic_distance(a, b) for i, a in enumerate(points) for b in points[i + 1:]),
                  default=grid.side_length)
        radius = 0.25 * min(sep, grid.side_length)
    with np.errstate(over="ignore"):
        res = equation_residual(problem, uv)
        pot = (problem.f_values - lam**2) * np.exp(uv)
    residual = float(np.max(np.abs(res)))
    rel = residual / (1.0 + float(np.max(np.abs(pot))))
    if lam > 0:
        masses = bubble_masses(problem, uv, radius, points)
    else:
        masses = [0.0] * len(points)
    mass_errors = [abs(m - EIGHT_PI) / EIGHT_PI for m in masses]

    prof, core = float("nan"), float("nan")
    used = []
    if lam > 0:
        prof, core = 0.0, 0.0
        for j, p in enumerate(points):
            if deltas is not None:
                delta = deltas[j]
            else:
                peak = float(sample(field_, np.asarray(p)))
                delta = math.exp(0.5 * (math.log(8.0) - 4 * math.log(lam) - peak))
            used.append(float(delta))
            eps = lam * delta
            rr = np.linspace(0.0, 10.0, 41)
            th = 2 * math.pi * np.arange(16) / 16
            R, T = np.meshgrid(rr, th, indexing="ij")
            y = np.stack([R * np.cos(T), R * np.sin(T)], -1).reshape(-1, 2)
            vals = sample(field_, np.asarray(p) + eps * y) + 4 * math.log(lam) + 2 * math.log(delta)
            target = np.log(8.0 / (1.0 + np.sum(y**2, -1)) ** 2)
            err = np.abs(vals - target)
            prof = max(prof, float(err.max()))
            core = max(core, float(err[np.hypot(y[:, 0], y[:, 1]) <= 3.0].max()))

    area = grid.area
    with np.errstate(over="ignore"):
        mass_total = float(np.sum(pot) * h2)
        e_minus = float(np.sum(np.exp(-uv)) * h2)
    mass_identity = abs(mass_total - problem.alpha * area) / (problem.alpha * area)
    kappa_integral = float(np.sum(lam**2 - problem.f_values) * h2)
    rhs = -(gradient_weight_integral(uv, grid.h) + problem.alpha * e_minus)
    curvature_identity = abs(kappa_integral - rhs) / max(abs(kappa_integral), abs(rhs), 1e-300)
    return VerificationReport(residual, rel, masses, mass_errors, prof, core, mass_identity, curvature_identity,
                              used, dict(tolerances or {}))


def rescaled_profile_error(problem: CurvatureProblem, u, deltas, y_max=3.0) -> float:
    rep = verify_solution(problem, u, deltas=deltas)
    return rep.profile_error_core if y_max <= 3.0 else rep.profile_error


def star_ratio(ans: Ansatz, sol_phi, source, sigma=0.5) -> float:
    """``|phi|_inf / (log(1/eps) |source|_*)`` for an original-variable source."""
    sn = StarNorm.for_ansatz(ans, sigma)
    eps = min(ans.epsilons)
    return float(np.max(np.abs(getattr(sol_phi, "values", sol_phi)))) / (math.log(1 / eps) * sn.original_norm(source))
