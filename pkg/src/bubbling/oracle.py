"""Direct solves of the discrete equation and continuation in lambda.

The discrete problem is

    F(u, lam) = Delta_h u - (f - lam^2) e^u + alpha = 0

on the periodic grid.  Its Jacobian in ``u`` is ``Delta_h - (f - lam^2) e^u``
and in ``lam`` is ``2 lam e^u``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import Diverged, NoConvergence, SingularSystem, StepCollapse
from .grid import OperatorSolver, ScalarField, _atomic_write, helmholtz_matrix
from .problem import CurvatureProblem
from .reduction import bubble_masses, equation_residual, gradient_weight_integral

log = logging.getLogger(__name__)


def scaled_residual(problem: CurvatureProblem, u) -> float:
    """``|F(u)|_inf / (1 + |(f - lam^2) e^u|_inf)``."""
    u = np.asarray(getattr(u, "values", u), dtype=float)
    pot = (problem.f_values - problem.lam**2) * np.exp(u)
    return float(np.max(np.abs(equation_residual(problem, u)))) / (1.0 + float(np.max(np.abs(pot))))


@dataclass
class NewtonResult:
    u: ScalarField
    iterations: int
    residuals: list
    steps: list

    @property
    def residual(self) -> float:
        return self.residuals[-1]


def _jacobian_solver(problem: CurvatureProblem, u: np.ndarray) -> OperatorSolver:
    pot = (problem.f_values - problem.lam**2) * np.exp(u)
    M = helmholtz_matrix(problem.grid, pot)
    if np.all(pot >= 0):
        return OperatorSolver(M, definite=True)
    return OperatorSolver(M, definite=False, surrogate=helmholtz_matrix(problem.grid, np.abs(pot)))


def newton(problem: CurvatureProblem, u_init, *, tol=1e-10, maxiter=40, max_norm=50.0) -> NewtonResult:
    """Damped Newton with backtracking on the residual norm.

    Converged when :func:`scaled_residual` is at most ``tol``.
    """
    u = np.array(getattr(u_init, "values", u_init), dtype=float)
    if not np.all(np.isfinite(u)):
        raise NoConvergence("initial guess is not finite")
    res = scaled_residual(problem, u)
    residuals, steps = [res], []
    for it in range(maxiter + 1):
        if res <= tol:
            return NewtonResult(ScalarField(problem.grid, u, residual=res), it, residuals, steps)
        if it == maxiter:
            break
        F = equation_residual(problem, u)
        du = _jacobian_solver(problem, u).solve(F.ravel()).reshape(u.shape)
        norm0 = float(np.linalg.norm(F))
        t = 1.0
        while True:
            trial = u + t * du
            if np.max(np.abs(trial)) > max_norm:
                if t < 1 / 64:
                    raise Diverged(f"|u|_inf exceeded {max_norm}", residuals)
                t *= 0.5
                continue
            with np.errstate(over="ignore"):
                Ft = equation_residual(problem, trial)
            if np.all(np.isfinite(Ft)) and np.linalg.norm(Ft) < (1 - 1e-4 * t) * norm0:
                break
            t *= 0.5
            if t < 1 / 1024:
                raise NoConvergence("line search failed", residuals)
        u = trial
        steps.append(t)
        res = scaled_residual(problem, u)
        residuals.append(res)
        log.debug("newton %d: residual %.3e step %.3g", it + 1, res, t)
    raise NoConvergence(f"Newton did not converge in {maxiter} iterations", residuals)


def newton_solve(problem: CurvatureProblem, u_init, **kwargs) -> ScalarField:
    """Converged discrete solution started from ``u_init``."""
    return newton(problem, u_init, **kwargs).u


def curvature_identity_error(problem: CurvatureProblem, u) -> float:
    """Relative gap in ``int kappa = -int (|grad u|^2 + alpha) e^{-u}`` (summation-by-parts form)."""
    u = np.asarray(getattr(u, "values", u), dtype=float)
    h2 = problem.grid.h**2
    lhs = float(np.sum(problem.lam**2 - problem.f_values) * h2)
    rhs = -(gradient_weight_integral(u, problem.grid.h) + problem.alpha * float(np.sum(np.exp(-u)) * h2))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def mass_identity_error(problem: CurvatureProblem, u) -> float:
    u = np.asarray(getattr(u, "values", u), dtype=float)
    total = float(np.sum((problem.f_values - problem.lam**2) * np.exp(u)) * problem.grid.h**2)
    target = problem.alpha * problem.grid.area
    return abs(total - target) / target


@dataclass
class BranchPoint:
    lam: float
    sup_norm: float
    u_at_p: float
    residual: float
    masses: list
    arclength: float
    mass_identity: float
    curvature_identity: float


@dataclass
class BranchRecord:
    """Samples along a solution branch."""

    tag: str
    points: list = field(default_factory=list)
    fold: float | None = None
    fields: list = field(default_factory=list, repr=False)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])

    @property
    def sup_norms(self) -> np.ndarray:
        return np.array([p.sup_norm for p in self.points])

    def to_csv(self) -> str:
        buf = io.StringIO()
        nm = max((len(p.masses) for p in self.points), default=0)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "sup_norm", "u_p1", "residual"] + [f"mass{i + 1}" for i in range(nm)]
                   + ["arclength", "mass_identity", "curvature_identity"])
        for p in self.points:
            w.writerow([repr(p.lam), repr(p.sup_norm), repr(p.u_at_p), repr(p.residual)]
                       + [repr(m) for m in p.masses] + [repr(p.arclength), repr(p.mass_identity),
                                                          repr(p.curvature_identity)])
        return buf.getvalue()

    def write_csv(self, path):
        return _atomic_write(path, self.to_csv().encode())


def _branch_point(problem: CurvatureProblem, u: np.ndarray, s: float, radius: float) -> BranchPoint:
    p1 = problem.points[0]
    grid = problem.grid
    i = int(round(p1[0] / grid.h)) % grid.n
    j = int(round(p1[1] / grid.h)) % grid.n
    masses = bubble_masses(problem, u, radius) if problem.lam > 0 else [0.0] * len(problem.points)
    return BranchPoint(float(problem.lam), float(np.max(np.abs(u))), float(u[i, j]), scaled_residual(problem, u),
                       masses, float(s), mass_identity_error(problem, u), curvature_identity_error(problem, u))


def _mass_radius(problem: CurvatureProblem) -> float:
    pts = problem.points
    L = problem.grid.side_length
    sep = min((problem.grid.periodic_distance(a, b) for i, a in enumerate(pts) for b in pts[i + 1:]), default=L)
    return 0.25 * min(sep, L)


def minimal_branch(problem: CurvatureProblem, lambda_grid, *, u0=None, keep_fields=False, **newton_kwargs) -> BranchRecord:
    """Natural continuation in increasing ``lambda`` from the ``lambda = 0`` solution.

    Stops at the first Newton failure; the last accepted value bounds the fold from below.
    """
    rec = BranchRecord("minimal")
    u = np.zeros((problem.grid.n, problem.grid.n)) if u0 is None else np.array(getattr(u0, "values", u0), dtype=float)
    radius = _mass_radius(problem)
    for lam in sorted(float(x) for x in lambda_grid):
        pb = problem.with_lambda(lam)
        try:
            u = newton(pb, u, **newton_kwargs).u.values
        except (NoConvergence, SingularSystem) as exc:
            log.info("minimal branch stops at lambda = %.6g: %s", lam, exc)
            break
        rec.points.append(_branch_point(pb, u, lam, radius))
        if keep_fields:
            rec.fields.append(u.copy())
    return rec


class _Bordered:
    """Pseudo-arclength system on ``(u, lambda)`` with the inner product ``h^2 sum + lambda``-weight."""

    def __init__(self, problem: CurvatureProblem):
        self.problem = problem
        self.h2 = problem.grid.h**2

    def F(self, u, lam):
        return equation_residual(self.problem.with_lambda(lam), u)

    def dot(self, a_u, a_l, b_u, b_l):
        return self.h2 * float(np.sum(a_u * b_u)) + a_l * b_l

    def solve(self, u, lam, tau_u, tau_l, rhs_u, rhs_l):
        """Solve ``[J_u J_l; tau_u^T h^2, tau_l] [x_u; x_l] = [rhs_u; rhs_l]``."""
        pb = self.problem.with_lambda(lam)
        pot = (pb.f_values - lam**2) * np.exp(u)
        J = -helmholtz_matrix(pb.grid, pot)
        Jl = (2 * lam * np.exp(u)).ravel()
        N = J.shape[0]
        A = sp.bmat([[J, sp.csr_matrix(Jl[:, None])],
                     [sp.csr_matrix(self.h2 * tau_u.ravel()[None, :]), sp.csr_matrix([[tau_l]])]], format="csc")
        x = spla.spsolve(A, np.concatenate([rhs_u.ravel(), [rhs_l]]))
        if not np.all(np.isfinite(x)):
            raise SingularSystem("bordered system is singular", 0.0)
        return x[:N].reshape(u.shape), float(x[N])


def continue_fold(problem: CurvatureProblem, start, *, start_lambda=None, previous=None, ds=0.05, ds_min=1e-8,
                  ds_max=2.0, max_steps=400, lambda_stop=None, gap_target=None, reference=None, tol=1e-10,
                  keep_fields=False) -> BranchRecord:
    """Pseudo-arclength continuation from a converged solution.

    ``previous = (u, lambda)`` fixes the initial secant direction (otherwise
    the branch is followed towards increasing ``lambda``).  The run stops
    after the fold once ``lambda`` drops below ``lambda_stop`` or, when
    ``gap_target`` is set, once ``|u|_inf`` exceeds the value at the same
    ``lambda`` before the fold (or on ``reference``) by that amount.
    """
    lam = float(problem.lam if start_lambda is None else start_lambda)
    u = np.array(getattr(start, "values", start), dtype=float)
    sys_ = _Bordered(problem)
    if previous is not None:
        pu, pl = np.asarray(getattr(previous[0], "values", previous[0]), dtype=float), float(previous[1])
        tu, tl = u - pu, lam - pl
    else:
        # tangent from the linearization: J du = -F_lambda
        pb = problem.with_lambda(lam)
        rhs = (2 * lam * np.exp(u)).ravel()
        du = _jacobian_solver(pb, u).solve(rhs).reshape(u.shape)
        tu, tl = du, 1.0
    nrm = math.sqrt(sys_.dot(tu, tl, tu, tl))
    tu, tl = tu / nrm, tl / nrm
    radius = _mass_radius(problem)
    rec = BranchRecord("continuation")
    s = 0.0
    rec.points.append(_branch_point(problem.with_lambda(lam), u, s, radius))
    if keep_fields:
        rec.fields.append(u.copy())
    folded = False
    lam_hist = [lam]
    for _ in range(max_steps):
        pu, pl = u + ds * tu, lam + ds * tl
        ok = False
        iters = 0
        for iters in range(1, 13):
            if not (pl > 0) or np.max(np.abs(pu)) > 50:
                break
            F = sys_.F(pu, pl)
            g = sys_.dot(tu, tl, pu - u, pl - lam) - ds
            res = float(np.max(np.abs(F))) / (1.0 + float(np.max(np.abs((problem.f_values - pl**2) * np.exp(pu)))))
            if res <= tol and abs(g) <= 1e-12:
                ok = True
                break
            try:
                xu, xl = sys_.solve(pu, pl, tu, tl, -F, -g)
            except SingularSystem:
                break
            pu, pl = pu + xu, pl + xl
        if not ok:
            ds *= 0.5
            if ds < ds_min:
                raise StepCollapse(f"arclength step fell below {ds_min}", ds)
            continue
        # secant tangent
        nu, nl = pu - u, pl - lam
        nrm = math.sqrt(sys_.dot(nu, nl, nu, nl))
        tu, tl = nu / nrm, nl / nrm
        s += ds
        u, lam = pu, pl
        pb = problem.with_lambda(lam)
        rec.points.append(_branch_point(pb, u, s, radius))
        if keep_fields:
            rec.fields.append(u.copy())
        lam_hist.append(lam)
        if not folded and len(lam_hist) >= 3 and lam_hist[-1] < lam_hist[-2] >= lam_hist[-3]:
            folded = True
            rec.fold = _parabola_peak(rec.points[-3:])
        if iters <= 3:
            ds = min(ds * 1.5, ds_max)
        elif iters >= 6:
            ds *= 0.5
        if folded:
            if lambda_stop is not None and lam <= lambda_stop:
                break
            if gap_target is not None:
                lower = _sup_norm_before_fold(reference if reference is not None else rec, lam)
                if lower is not None and rec.points[-1].sup_norm - lower > gap_target:
                    break
    return rec


def _parabola_peak(pts) -> float:
    s = np.array([p.arclength for p in pts])
    lam = np.array([p.lam for p in pts])
    a, b, c = np.polyfit(s - s[1], lam, 2)
    if a >= 0:
        return float(lam.max())
    return float(c - b * b / (4 * a))


def _sup_norm_before_fold(rec: BranchRecord, lam: float):
    """``|u|_inf`` interpolated on the pre-fold part of the branch at ``lam``."""
    lams = rec.lambdas
    if not len(lams):
        return None
    k = int(np.argmax(lams))
    pre_l, pre_n = lams[:k + 1], rec.sup_norms[:k + 1]
    if lam < pre_l.min():
        return None
    order = np.argsort(pre_l)
    return float(np.interp(lam, pre_l[order], pre_n[order]))


def solutions_at(rec: BranchRecord, lam: float):
    """Sup norms of the branch solutions interpolated at ``lam`` (one per monotone piece)."""
    lams = rec.lambdas
    norms = rec.sup_norms
    out = []
    for i in range(len(lams) - 1):
        a, b = lams[i], lams[i + 1]
        if min(a, b) <= lam <= max(a, b) and a != b:
            t = (lam - a) / (b - a)
            out.append(float(norms[i] + t * (norms[i + 1] - norms[i])))
    return out


@dataclass
class HeightLawFit:
    """Regression of ``u(p)`` on ``log lambda`` and ``log|log lambda|``."""

    lambdas: list
    heights: list
    subdominant: float
    slope: float
    intercept: float
    rms: dict
    free_fit: tuple

    @property
    def slope_error(self) -> float:
        return abs(self.slope + 4.0) / 4.0

    def as_dict(self) -> dict:
        return {"lambdas": self.lambdas, "heights": self.heights, "subdominant": self.subdominant,
                "slope": self.slope, "intercept": self.intercept, "slope_error": self.slope_error,
                "rms": self.rms, "free_fit": list(self.free_fit)}


def height_law(lambdas, heights, candidates=(2.0, -2.0)) -> HeightLawFit:
    """Pick the ``log|log lambda|`` coefficient among ``candidates`` by
    residual of ``u + 4 log lambda = b log|log lambda| + const``, then fit
    the ``log lambda`` slope with that coefficient held fixed."""
    lam = np.asarray(lambdas, dtype=float)
    u = np.asarray(heights, dtype=float)
    if lam.size < 3:
        raise ValueError("at least three samples are needed")
    L1 = np.log(lam)
    L2 = np.log(np.abs(np.log(lam)))
    rms = {}
    for b in candidates:
        y = u + 4 * L1 - b * L2
        rms[float(b)] = float(np.sqrt(np.mean((y - y.mean()) ** 2)))
    best = min(rms, key=rms.get)
    slope, intercept = np.polyfit(L1, u - best * L2, 1)
    A = np.stack([L1, L2, np.ones_like(L1)], 1)
    free = tuple(float(v) for v in np.linalg.lstsq(A, u, rcond=None)[0])
    return HeightLawFit(lam.tolist(), u.tolist(), best, float(slope), float(intercept), rms, free)


@dataclass
class FoldTrace:
    minimal: BranchRecord
    continuation: BranchRecord
    fold: float | None
    test_lambda: float | None
    test_norms: tuple

    @property
    def two_solutions(self) -> bool:
        return self.test_lambda is not None and len(self.test_norms) == 2


def trace_fold(problem: CurvatureProblem, lambda_grid, *, gap_target=2.5, ds=0.02, max_steps=400,
               lambda_stop=None, **newton_kwargs) -> FoldTrace:
    """Minimal branch over ``lambda_grid``, then arclength continuation through the fold.

    The continuation stops once the large branch sits ``gap_target`` above
    the minimal one in sup norm; that lambda is the two-solution test point.
    """
    minimal = minimal_branch(problem, lambda_grid, keep_fields=True, **newton_kwargs)
    if len(minimal.points) < 2:
        raise NoConvergence("minimal branch has fewer than two points")
    start, prev = minimal.fields[-1], minimal.fields[-2]
    cont = continue_fold(problem.with_lambda(minimal.points[-1].lam), start,
                         previous=(prev, minimal.points[-2].lam), ds=ds, max_steps=max_steps,
                         gap_target=gap_target, reference=minimal, lambda_stop=lambda_stop)
    test, norms = None, ()
    if cont.fold is not None:
        last = cont.points[-1]
        lower = _sup_norm_before_fold(minimal, last.lam)
        if lower is not None and last.sup_norm - lower > gap_target:
            test, norms = last.lam, (lower, last.sup_norm)
    minimal.fields = []
    return FoldTrace(minimal, cont, cont.fold, test, norms)
