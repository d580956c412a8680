"""Nonlinear Green function: singular template plus a numerically solved
regular part.

Around each concentration point ``p`` the template is
``Gamma = -4 log r + V(r)`` with ``V`` the closed-form log-log profile, so that
``Delta Gamma = e^V / r^2 = 2 / (r^2 log^2 r)`` away from ``p``.  The regular
part ``H`` of ``G = sum eta_j Gamma_j + H`` solves

    Delta H - f e^{sum eta Gamma} e^H + alpha = Theta,
    Theta = -sum_j (eta Delta Gamma + 2 grad eta . grad Gamma + Gamma Delta eta),

and ``Theta`` integrates to ``-8 pi`` per point.  Both ``Theta`` and the
coefficient ``f e^{eta Gamma}`` behave like ``1/(r^2 log^2 r)`` at ``p``; on
the cells next to ``p`` they are replaced by exact cell averages computed in
polar coordinates with the substitution ``s = 1/log(1/r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import BadProblem, DomainError, InsufficientResolution, NoConvergence
from .grid import Grid2D, OperatorSolver, ScalarField, helmholtz_matrix, laplacian_values, resample, sample
from .problem import CurvatureProblem, validate
from .radial import v_exact

# cells whose centre lies within this many mesh widths of p get exact averages
NEAR_CELLS = 6
_GL_THETA = np.polynomial.legendre.leggauss(16)
_GL_LOG = np.polynomial.legendre.leggauss(16)
_GL_S = np.polynomial.legendre.leggauss(8)
_LOG_SPAN = 6.0


def quintic_cutoff(r, r_in, r_out):
    """C^2 radial cutoff: 1 for r <= r_in, 0 for r >= r_out.

    Returns the value and its first two r-derivatives.
    """
    r = np.asarray(r, dtype=float)
    w = r_out - r_in
    s = np.clip((r - r_in) / w, 0.0, 1.0)
    eta = 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)
    d1 = -30.0 * s**2 * (1.0 - s) ** 2 / w
    d2 = -60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / w**2
    return eta, d1, d2


def singular_template(p, x, side_length=None):
    """``-4 log|x - p| + V(|x - p|)`` using the minimal periodic image if a side length is given."""
    d = np.asarray(x, dtype=float) - np.asarray(p, dtype=float)
    if side_length is not None:
        d = (d + 0.5 * side_length) % side_length - 0.5 * side_length
    r = np.hypot(d[..., 0], d[..., 1])
    if np.any(r <= 0) or np.any(r >= 1):
        raise DomainError("template defined for 0 < |x - p| < 1")
    out = -4.0 * np.log(r) + v_exact(r)
    return float(out) if np.ndim(out) == 0 else out


def template_radial(r, shift=0.0, level=0.0):
    """Value, r-derivative and Laplacian of ``-4 log r - 2 log((log(1/r) + shift)/sqrt 2) - level``.

    ``shift = level = 0`` is the plain template.  Every member of the family
    solves ``Delta Gamma = e^{level} r^2 e^Gamma`` exactly; the working
    template uses ``level = log alpha0`` and a fitted ``shift`` so that the
    remainder is smooth at ``p``.
    """
    r = np.asarray(r, dtype=float)
    ell = -np.log(r) + shift
    val = -4.0 * np.log(r) - 2.0 * np.log(ell / math.sqrt(2.0)) - level
    d1 = -4.0 / r + 2.0 / (r * ell)
    lap = 2.0 / (r * ell) ** 2
    return val, d1, lap


def template_flux(a, shift=0.0):
    """Outward flux of grad Gamma through the circle of radius ``a``."""
    return 2.0 * math.pi * a * float(template_radial(a, shift)[1])


# ------------------------------------------------------------ quadrature


def _triangle_nodes(p, a, b, shift=0.0):
    """Polar quadrature nodes for the signed triangle (p, a, b).

    The weights integrate ``g(x) * 2 / (r^2 (log(1/r) + shift)^2)``; the
    singular factor is built in.  Returns radii, unit directions and weights.
    """
    va, vb = a - p, b - p
    cross = va[0] * vb[1] - va[1] * vb[0]
    edge = b - a
    elen = math.hypot(*edge)
    if elen == 0 or abs(cross) <= 1e-14 * elen * max(math.hypot(*va), math.hypot(*vb)):
        return np.zeros(0), np.zeros((0, 2)), np.zeros(0)
    nrm = np.array([edge[1], -edge[0]]) / elen
    dn = float(va @ nrm)
    if dn < 0:
        nrm, dn = -nrm, -dn
    th_a = math.atan2(va[1], va[0])
    sweep = math.atan2(cross, float(va @ vb))
    th_n = math.atan2(nrm[1], nrm[0])
    xg, wg = _GL_THETA
    th = th_a + 0.5 * sweep * (xg + 1.0)
    wth = 0.5 * sweep * wg
    rho = dn / np.cos(th - th_n)
    # outer part in u = log r over [log rho - span, log rho]
    xu, wu = _GL_LOG
    u = np.log(rho)[:, None] - 0.5 * _LOG_SPAN * (1.0 - xu)[None, :]
    ru = np.exp(u)
    wu_full = wth[:, None] * (0.5 * _LOG_SPAN * wu)[None, :] * 2.0 / (shift - u) ** 2
    # inner part in s = 1/(log(1/r) + shift) over [0, s(rho e^-span)]
    r_in = rho * math.exp(-_LOG_SPAN)
    s_max = 1.0 / (shift - np.log(r_in))
    xs, ws = _GL_S
    s = 0.5 * s_max[:, None] * (xs + 1.0)[None, :]
    rs = np.exp(shift - 1.0 / s)
    ws_full = wth[:, None] * 0.5 * s_max[:, None] * ws[None, :] * 2.0
    r_all = np.concatenate([ru, rs], axis=1)
    w_all = np.concatenate([wu_full, ws_full], axis=1)
    dirs = np.broadcast_to(np.stack([np.cos(th), np.sin(th)], -1)[:, None, :], r_all.shape + (2,))
    return r_all.ravel(), dirs.reshape(-1, 2), w_all.ravel()


def near_cells(grid: Grid2D, p, radius_cells=NEAR_CELLS):
    """Index pairs and centres of cells within ``radius_cells`` mesh widths of ``p``."""
    h, n = grid.h, grid.n
    c = np.round(np.asarray(p) / h).astype(int)
    k = int(math.ceil(radius_cells)) + 1
    offs = np.arange(-k, k + 1)
    I, J = np.meshgrid(c[0] + offs, c[1] + offs, indexing="ij")
    centres = np.stack([I * h, J * h], -1).reshape(-1, 2)
    d = np.hypot(*(centres - np.asarray(p)).T)
    keep = d <= radius_cells * h
    return (I.ravel()[keep] % n, J.ravel()[keep] % n), centres[keep]


def singular_cell_quadrature(grid: Grid2D, p, centres, shift=0.0):
    """Quadrature rule over each cell for integrands ``g(x) * 2/(r^2 (log(1/r) + shift)^2)``.

    Returns ``(radii, directions, weights, owner)``: nodes are
    ``p + radii * directions`` and ``owner[k]`` is the cell index of node
    ``k``.  Every cell is split into the four signed triangles formed by ``p``
    and its edges, so cells that do not contain ``p`` use the same rule.
    """
    p = np.asarray(p, dtype=float)
    hh = 0.5 * grid.h
    corners = np.array([[-hh, -hh], [hh, -hh], [hh, hh], [-hh, hh]])
    rad, dirs, wts, own = [], [], [], []
    for ci, cc in enumerate(centres):
        verts = cc + corners
        for e in range(4):
            r, u, w = _triangle_nodes(p, verts[e], verts[(e + 1) % 4], shift)
            if w.size:
                rad.append(r)
                dirs.append(u)
                wts.append(w)
                own.append(np.full(w.size, ci))
    return np.concatenate(rad), np.concatenate(dirs), np.concatenate(wts), np.concatenate(own)


# ------------------------------------------------------------ Green function


@dataclass(frozen=True)
class Template:
    """Singular template parameters of one point."""

    point: np.ndarray
    index: int
    shift: float = 0.0
    level: float = 0.0

    def radial(self, r):
        return template_radial(r, self.shift, self.level)


def _cutoff_sum(templates, gamma, x, L, which):
    """``sum_j eta_j Gamma_j(x)`` (``which='working'``) or the difference to the
    plain template, ``sum_j eta_j (Gamma_j - Gamma)`` (``which='difference'``)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1])
    for tp in templates:
        d = (x - tp.point + 0.5 * L) % L - 0.5 * L
        r = np.hypot(d[..., 0], d[..., 1])
        eta = quintic_cutoff(r, 0.5 * gamma, gamma)[0]
        m = (r < gamma) & (r > 0)
        rr = np.where(m, r, 0.5 * gamma)
        if which == "working":
            val = np.where(m, tp.radial(rr)[0], 0.0)
            out = out + np.where(r > 0, eta * val, np.inf)
        else:
            ell = -np.log(rr)
            diff = -2.0 * np.log1p(tp.shift / ell) - tp.level
            out = out + np.where(m, eta * diff, np.where(r > 0, 0.0, -tp.level))
    return out


@dataclass(eq=False)
class GreenFunction:
    """``G = sum_j eta_j Gamma_j + H`` with the working templates ``Gamma_j``.

    ``smooth_part`` is the remainder for the working templates; the remainder
    for the plain template ``-4 log r + V(r)`` is ``regular_part``.  The two
    agree outside the cutoff disks.
    """

    problem: CurvatureProblem
    chart_radius: float
    smooth_part: ScalarField
    templates: list
    H_at_points: list
    theta: ScalarField
    theta_raw_integral: float
    coefficient: np.ndarray = field(repr=False)
    mass_check: float = float("nan")
    mass_target: float = float("nan")
    newton_history: list = field(default_factory=list)
    shift_history: list = field(default_factory=list)
    beta_bounds: list = field(default_factory=list)

    @property
    def grid(self) -> Grid2D:
        return self.smooth_part.grid

    @property
    def points(self):
        return self.problem.points

    @property
    def regular_part(self) -> ScalarField:
        X, Y = self.grid.mesh()
        diff = _cutoff_sum(self.templates, self.chart_radius, np.stack([X, Y], -1), self.grid.side_length,
                           "difference")
        return ScalarField(self.grid, self.smooth_part.values + diff)

    @property
    def H(self) -> ScalarField:
        return self.regular_part

    @property
    def mass_error(self) -> float:
        return abs(self.mass_check - self.mass_target) / self.mass_target

    def singular_part(self, x):
        """``sum_j eta_j Gamma_j`` at points ``x`` (trailing axis 2); infinite at the ``p_j``."""
        return _cutoff_sum(self.templates, self.chart_radius, x, self.grid.side_length, "working")

    def G(self, x):
        """Green function at arbitrary points."""
        x = np.asarray(x, dtype=float)
        return self.singular_part(x) + sample(self.smooth_part, x.reshape(-1, 2)).reshape(x.shape[:-1])

    def smooth_on(self, grid: Grid2D) -> ScalarField:
        return resample(self.smooth_part, grid)

    def G_on(self, grid: Grid2D) -> np.ndarray:
        """G at the nodes of ``grid``; ``inf`` at nodes coinciding with a point."""
        X, Y = grid.mesh()
        return self.singular_part(np.stack([X, Y], -1)) + self.smooth_on(grid).values


def default_chart_radius(problem: CurvatureProblem, fraction=0.2) -> float:
    """``fraction * L``, at most half the smallest point separation, and
    below both ``0.45 L`` (charts must not reach their periodic images) and
    0.5 (the template needs ``r < 1``)."""
    L = problem.grid.side_length
    pts = [np.array(w.point) for w in problem.f.wells]
    gamma = min(fraction, 0.45) * L
    for i in range(len(pts)):
        for j in range(i):
            gamma = min(gamma, 0.5 * problem.grid.periodic_distance(pts[i], pts[j]))
    return min(gamma, 0.5)


def analytic_theta(problem: CurvatureProblem, gamma: float, templates=None) -> np.ndarray:
    """Pointwise ``-sum_j (eta Delta Gamma + 2 eta' Gamma' + Gamma Delta eta)``; zero at the points."""
    grid = problem.grid
    templates = templates if templates is not None else _plain_templates(problem)
    theta = np.zeros((grid.n, grid.n))
    for tp in templates:
        dx, dy = grid.displacement(tp.point)
        r = np.hypot(dx, dy)
        inside = (r < gamma) & (r > 0)
        rr = np.where(inside, r, 0.5 * gamma)
        val, d1, lap = tp.radial(rr)
        eta, e1, e2 = quintic_cutoff(rr, 0.5 * gamma, gamma)
        theta -= np.where(inside, eta * lap + 2.0 * e1 * d1 + val * (e2 + e1 / rr), 0.0)
    return theta


def _plain_templates(problem):
    return [Template(p, j) for j, p in zip(problem.bubble_indices, problem.points)]


def _coefficient_and_theta(problem: CurvatureProblem, gamma: float, templates=None):
    """Cell-consistent coefficient ``f e^{sum eta Gamma}`` and raw ``Theta``.

    Where the cutoff varies ``Theta`` is minus the discrete Laplacian of
    ``sum eta Gamma``, so that ``G`` satisfies the discrete equation there
    exactly.  Inside ``B(p, gamma/2)`` it is ``-Delta Gamma`` pointwise, which
    keeps it consistent with the coefficient (both carry the same
    ``1/(r^2 log^2 r)`` profile), and the cells next to each point get exact
    averages.
    """
    grid = problem.grid
    n, h = grid.n, grid.h
    templates = templates if templates is not None else _plain_templates(problem)
    f = problem.f_values
    log_c = np.zeros((n, n))
    core = np.zeros((n, n), dtype=bool)
    core_theta = np.zeros((n, n))
    for tp in templates:
        dx, dy = grid.displacement(tp.point)
        r = np.hypot(dx, dy)
        inside = (r < gamma) & (r > 0)
        rr = np.where(inside, r, 0.5 * gamma)
        val, _, lap = tp.radial(rr)
        eta = quintic_cutoff(rr, 0.5 * gamma, gamma)[0]
        log_c += np.where(inside, eta * val, 0.0)
        here = inside & (r < 0.5 * gamma - 2 * h)
        core |= here
        core_theta -= np.where(here, lap, 0.0)
    theta = np.where(core, core_theta, -laplacian_values(log_c, h))
    with np.errstate(over="ignore"):
        coef = f * np.exp(log_c)
    for tp in templates:
        (ii, jj), centres = near_cells(grid, tp.point)
        rq, uq, w, own = singular_cell_quadrature(grid, tp.point, centres, tp.shift)
        # f / r^2 is smooth and bounded; the other cutoffs vanish here
        g_f = problem.f.quotient(tp.index, rq, uq) * math.exp(-tp.level)
        area = h * h
        coef[ii, jj] = np.bincount(own, w * g_f, minlength=len(centres)) / area
        theta[ii, jj] = -np.bincount(own, w, minlength=len(centres)) / area
    return coef, theta


def compute_theta(problem: CurvatureProblem, gamma: float, templates=None):
    """Projected ``Theta`` and its raw discrete integral.

    The exact integral is ``-8 pi`` per point (the flux of the template); the
    projection removes the small quadrature defect by a constant shift.
    """
    _, theta = _coefficient_and_theta(problem, gamma, templates)
    return _project_theta(problem, theta)


def _project_theta(problem, theta):
    grid = problem.grid
    raw = float(theta.sum() * grid.h**2)
    target = -8.0 * math.pi * len(problem.points)
    return ScalarField(grid, theta + (target - raw) / grid.area), raw


def _energy(H, coef, rhs_lin, h):
    gx = np.roll(H, -1, 0) - H
    gy = np.roll(H, -1, 1) - H
    return float(0.5 * (gx**2 + gy**2).sum() + h * h * (coef * np.exp(H) + rhs_lin * H).sum())


def _newton_regular_part(grid, coef, theta, alpha, H0, tol=1e-9, maxiter=60):
    """Damped Newton on the convex energy whose Euler-Lagrange equation is
    ``Delta H - coef e^H + alpha = theta``."""
    H = np.array(H0, dtype=float)
    h = grid.h
    lin = theta - alpha
    history = []
    E = _energy(H, coef, lin, h)
    for it in range(maxiter):
        ceH = coef * np.exp(H)
        R = laplacian_values(H, h) - ceH + alpha - theta
        scale = max(float(np.max(ceH)), float(np.max(np.abs(theta))), alpha, 1.0)
        rel = float(np.max(np.abs(R))) / scale
        history.append(rel)
        if not np.isfinite(rel):
            raise NoConvergence("non-finite residual in regular-part Newton", history)
        if float(ceH.sum()) <= 0.0:
            # no zero-order term (f == 0): mean-zero Poisson problem
            from .grid import solve_helmholtz

            if abs(float(R.mean())) > 1e-10 * max(1.0, float(np.max(np.abs(R)))):
                raise NoConvergence("regular-part problem is incompatible (zero coefficient)", history)
            dH = solve_helmholtz(0.0, ScalarField(grid, R - R.mean())).values
            return H + dH, history
        A = helmholtz_matrix(grid, ceH)
        dH = OperatorSolver(A, definite=True).solve(R)
        t = 1.0
        slope = h * h * float((R * dH).sum())
        while True:
            Hn = H + t * dH
            with np.errstate(over="ignore"):
                En = _energy(Hn, coef, lin, h)
            if np.isfinite(En) and En <= E - 1e-4 * t * slope + 1e-13 * abs(E):
                break
            t *= 0.5
            if t < 1e-8:
                raise NoConvergence("line search failed in regular-part Newton", history)
        H, E = Hn, En
        step = t * float(np.max(np.abs(dH)))
        if rel <= tol and step <= 1e-9:
            R = laplacian_values(H, h) - coef * np.exp(H) + alpha - theta
            history.append(float(np.max(np.abs(R))) / scale)
            return H, history
        if step <= 1e-13 * max(1.0, float(np.max(np.abs(H)))):
            return H, history
    raise NoConvergence(f"regular-part Newton did not converge in {maxiter} steps", history)


def ring_profile(H: ScalarField, p, radii, samples=64):
    """Angular means of ``H`` on circles about ``p``."""
    th = 2 * math.pi * np.arange(samples) / samples
    pts = np.asarray(p)[None, None, :] + np.asarray(radii)[:, None, None] * np.stack([np.cos(th), np.sin(th)], -1)[None]
    return sample(H, pts.reshape(-1, 2)).reshape(len(radii), samples).mean(axis=1)


def fit_log_log_shift(H: ScalarField, p, gamma, shift=0.0):
    """Fit ``A - 2 log(1 + c/s) + b1 r^2 + b2 r^2/s^2`` with ``s = log(1/r) + shift`` to ring means of ``H``.

    A remainder that still contains the slowly decaying ``1/s`` mode shows up
    as ``c != 0``; ``A`` estimates the value at ``p``.  The ``r^2/s^2`` column
    is the leading response to the quadratic part of ``f``.
    """
    h = H.grid.h
    r_lo, r_hi = 4.0 * h, 0.25 * gamma
    if r_hi <= 2 * r_lo:
        r_lo = r_hi / 4
    radii = np.geomspace(r_lo, r_hi, 24)
    prof = ring_profile(H, p, radii)
    s = -np.log(radii) + shift
    r2 = radii**2

    def model(q):
        return q[0] - 2.0 * np.log1p(q[1] / s) + q[2] * r2 + q[3] * r2 / s**2

    fit = least_squares(lambda q: model(q) - prof, np.array([prof[0], 0.0, 0.0, 0.0]),
                        bounds=([-np.inf, -0.9 * s.min(), -np.inf, -np.inf], np.inf))
    return {"value": float(fit.x[0]), "shift": float(fit.x[1]), "curvature": float(fit.x[2]),
            "rms": float(np.sqrt(np.mean(fit.fun**2)))}


def extract_H_at(gf: GreenFunction, p) -> float:
    """``lim_{x -> p} (G - (-4 log r + V(r)))`` from the solved remainder."""
    for tp, value in zip(gf.templates, gf.H_at_points):
        if np.allclose(tp.point, p):
            return value
    return float(sample(gf.regular_part, p))


def mass_quadrature(problem: CurvatureProblem, gamma: float, templates, smooth: ScalarField, sub=3) -> float:
    """Independent quadrature of ``integral f e^G``.

    Sub-cell midpoints with analytic ``f`` and templates and bicubic remainder;
    cells next to each point use the polar rule.
    """
    grid = problem.grid
    n, h = grid.n, grid.h
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    near_mask = np.zeros((n, n), dtype=bool)
    near_total = 0.0
    for tp in templates:
        (ii, jj), centres = near_cells(grid, tp.point)
        near_mask[ii, jj] = True
        rq, uq, w, _ = singular_cell_quadrature(grid, tp.point, centres, tp.shift)
        q = tp.point + rq[:, None] * uq
        near_total += float(np.sum(w * problem.f.quotient(tp.index, rq, uq) * math.exp(-tp.level)
                                   * np.exp(sample(smooth, q))))
    X, Y = grid.mesh()
    keep = ~near_mask
    xs, ys = X[keep], Y[keep]
    total = 0.0
    L = grid.side_length
    for a in offs:
        for b in offs:
            pts = np.stack([xs + a * h, ys + b * h], -1)
            vals = problem.f(pts) * np.exp(_cutoff_sum(templates, gamma, pts, L, "working") + sample(smooth, pts))
            total += float(vals.sum())
    return total * (h / sub) ** 2 + near_total


def solve_regular_part(problem: CurvatureProblem, *, chart_radius=None, chart_fraction=0.2, H_init=0.0,
                       tol=1e-9, check_mass=True, shift_passes=8, shift_tol=1e-5) -> GreenFunction:
    """Solve for the remainder of the Green function on ``problem.grid``.

    The working template per point uses ``level = log(trace(D^2 f)/4)`` and a
    shift refined over ``shift_passes`` solves: each pass fits the leftover
    ``1/log`` behaviour of the remainder and absorbs it into the template.
    """
    problem.require_admissible()
    grid = problem.grid
    gamma = default_chart_radius(problem, chart_fraction) if chart_radius is None else float(chart_radius)
    if gamma <= 8 * grid.h:
        raise BadProblem(f"chart radius {gamma:.3g} too small for mesh width {grid.h:.3g}")
    if gamma >= 0.5 * grid.side_length or gamma >= 0.5:
        raise BadProblem(f"chart radius {gamma:.3g} must stay below L/2 and 1/2")
    templates = [Template(p, j, 0.0, math.log(0.25 * float(np.trace(problem.f.hessian(j)))))
                 for j, p in zip(problem.bubble_indices, problem.points)]
    H = np.broadcast_to(np.asarray(getattr(H_init, "values", H_init), dtype=float), (grid.n, grid.n)).copy()
    newton_hist, shift_hist = [], []
    ell_min = -math.log(gamma)
    for _ in range(max(1, shift_passes)):
        coef, theta_raw = _coefficient_and_theta(problem, gamma, templates)
        theta, raw_int = _project_theta(problem, theta_raw)
        H, hist = _newton_regular_part(grid, coef, theta.values, problem.alpha, H, tol=tol)
        newton_hist.append(hist)
        Hf = ScalarField(grid, H, residual=hist[-1])
        fits = [fit_log_log_shift(Hf, tp.point, gamma, tp.shift) for tp in templates]
        shift_hist.append([(tp.shift, ft["shift"]) for tp, ft in zip(templates, fits)])
        if shift_passes <= 1 or all(abs(ft["shift"]) < shift_tol for ft in fits):
            break
        new = []
        for tp, ft in zip(templates, fits):
            s_new = tp.shift + ft["shift"]
            s_new = max(s_new, 0.2 - ell_min)
            # remove the absorbed part from the remainder so the next Newton starts close
            new.append(Template(tp.point, tp.index, s_new, tp.level))
        X, Y = grid.mesh()
        xy = np.stack([X, Y], -1)
        with np.errstate(invalid="ignore"):
            change = _cutoff_sum(templates, gamma, xy, grid.side_length, "working") \
                - _cutoff_sum(new, gamma, xy, grid.side_length, "working")
        # the two templates agree at the point itself
        H = H + np.where(np.isfinite(change), change, 0.0)
        templates = new
    Hf = ScalarField(grid, H, residual=newton_hist[-1][-1])
    report = validate(problem, gamma)
    gf = GreenFunction(
        problem=problem,
        chart_radius=gamma,
        smooth_part=Hf,
        templates=templates,
        H_at_points=[float(sample(Hf, tp.point)) - tp.level for tp in templates],
        theta=theta,
        theta_raw_integral=raw_int,
        coefficient=coef,
        mass_target=8.0 * math.pi * len(problem.points) + problem.alpha * grid.area,
        newton_history=newton_hist,
        shift_history=shift_hist,
        beta_bounds=report.beta_bounds,
    )
    if check_mass:
        gf.mass_check = mass_quadrature(problem, gamma, templates, Hf)
    return gf


def refine(gf: GreenFunction, grid: Grid2D, *, tol=1e-9, check_mass=False) -> GreenFunction:
    """Re-solve the remainder on another grid with the same templates.

    Starts from the interpolated remainder, so a few Newton steps suffice.
    The result satisfies the discrete equation of ``grid`` exactly away from
    the points, which an interpolated remainder does not.
    """
    if grid == gf.grid:
        return gf
    problem = gf.problem.with_grid(grid.n) if grid.side_length == gf.grid.side_length else None
    if problem is None:
        raise BadProblem("refinement must keep the side length")
    gamma = gf.chart_radius
    coef, theta_raw = _coefficient_and_theta(problem, gamma, gf.templates)
    theta, raw_int = _project_theta(problem, theta_raw)
    H0 = resample(gf.smooth_part, grid).values
    H, hist = _newton_regular_part(grid, coef, theta.values, problem.alpha, H0, tol=tol)
    Hf = ScalarField(grid, H, residual=hist[-1])
    out = GreenFunction(
        problem=problem,
        chart_radius=gamma,
        smooth_part=Hf,
        templates=gf.templates,
        H_at_points=[float(sample(Hf, tp.point)) - tp.level for tp in gf.templates],
        theta=theta,
        theta_raw_integral=raw_int,
        coefficient=coef,
        mass_target=gf.mass_target,
        newton_history=gf.newton_history + [hist],
        shift_history=gf.shift_history,
        beta_bounds=gf.beta_bounds,
    )
    if check_mass:
        out.mass_check = mass_quadrature(problem, gamma, gf.templates, Hf)
    return out


def discrete_mass(gf: GreenFunction) -> float:
    """``h^2 sum coef e^H``: equals ``alpha Area + 8 pi n`` by the discrete divergence theorem."""
    return float((gf.coefficient * np.exp(gf.smooth_part.values)).sum() * gf.grid.h**2)


def local_limit(hessian) -> float:
    """Value of the regular part at a point forced by the local equation:
    ``-log(trace(D^2 f)/4)``."""
    return -math.log(0.25 * float(np.trace(hessian)))


# ------------------------------------------------------------ mode decay


@dataclass
class ModeDecayReport:
    radii: np.ndarray
    modes: np.ndarray  # |a_k(r)|, shape (len(radii), k_max + 1)
    a0: np.ndarray
    L_limit: float
    k_exponents: np.ndarray
    log_exponents: np.ndarray
    b0: float
    alpha0: float
    noise_floor: float


def harmonic_extension(values_on_circle, radius, points_polar, alpha):
    """Solve ``-Delta J = alpha`` in the disk with Dirichlet data, by Fourier series.

    ``values_on_circle`` are equispaced samples; returns J at ``(r, theta)`` pairs.
    """
    m = len(values_on_circle)
    coeffs = np.fft.rfft(values_on_circle) / m
    r, th = points_polar
    k = np.arange(len(coeffs))
    rho = np.asarray(r)[..., None] / radius
    phase = np.exp(1j * k * np.asarray(th)[..., None])
    weight = np.where(k == 0, 1.0, 2.0)
    series = np.real(np.sum(weight * coeffs * rho**k * phase, axis=-1))
    return series + 0.25 * alpha * (radius**2 - np.asarray(r) ** 2)


def mode_decay_diagnostic(gf: GreenFunction, p, radii, *, k_max=8, samples=None, k_fit=(2, 8)) -> ModeDecayReport:
    """Angular Fourier coefficients of ``H - J`` on circles about ``p``.

    ``J`` solves ``-Delta J = alpha`` in ``B(p, gamma/2)`` with ``J = H`` on the
    boundary.  Reports ``|a_k(r)|``, fitted power laws in ``k`` and in
    ``1/log^2 r``, and the constant ``-log(alpha0 e^{J(p)})`` that ``a_0(r)``
    approaches, ``alpha0`` being the angular mean of ``f/r^2`` at ``p``.
    """
    radii = np.asarray(radii, dtype=float)
    R = 0.5 * gf.chart_radius
    if np.any(radii <= 0) or np.any(radii >= R):
        raise DomainError("radii must lie in (0, gamma/2)")
    samples = samples or 16 * (k_max + 1)
    if samples < 8 * (k_max + 1):
        raise InsufficientResolution(f"{samples} angular samples cannot resolve {k_max + 1} modes")
    H = gf.regular_part
    th = 2 * math.pi * np.arange(samples) / samples
    circle = np.stack([np.cos(th), np.sin(th)], -1)
    boundary = sample(H, (np.asarray(p) + R * circle))
    table = np.zeros((len(radii), k_max + 1))
    a0 = np.zeros(len(radii))
    tail = []
    for i, r in enumerate(radii):
        vals = sample(H, np.asarray(p) + r * circle)
        J = harmonic_extension(boundary, R, (np.full(samples, r), th), gf.problem.alpha)
        c = np.fft.rfft(vals - J) / samples
        table[i] = np.abs(c[: k_max + 1]) * np.where(np.arange(k_max + 1) == 0, 1.0, 2.0)
        a0[i] = float(np.real(c[0]))
        tail.append(np.abs(c[k_max + 1:]).max() if c.size > k_max + 1 else 0.0)
    b0 = float(harmonic_extension(boundary, R, (np.zeros(1), np.zeros(1)), gf.problem.alpha)[0])
    j = next((i for i, q in enumerate(gf.problem.points) if np.allclose(q, p)), None)
    hess = gf.problem.hessians[j] if j is not None else None
    alpha0 = 0.25 * float(np.trace(hess)) if hess is not None else float("nan")
    L_lim = -math.log(alpha0 * math.exp(b0)) if hess is not None else float("nan")
    noise = float(np.max(tail)) if tail else 0.0
    ks = np.arange(k_fit[0], k_fit[1] + 1)
    k_exp = np.full(len(radii), np.nan)
    for i in range(len(radii)):
        amp = table[i, ks]
        keep = amp > max(10 * noise, 1e-14)
        if keep.sum() >= 2:
            k_exp[i] = np.polyfit(np.log(ks[keep]), np.log(amp[keep]), 1)[0]
    log_exp = np.full(k_max + 1, np.nan)
    if len(radii) >= 2:
        x = np.log(np.log(1.0 / radii) ** 2)
        for k in range(1, k_max + 1):
            amp = table[:, k]
            if np.all(amp > max(10 * noise, 1e-14)):
                log_exp[k] = -np.polyfit(x, np.log(amp), 1)[0]
    return ModeDecayReport(radii, table, a0, L_lim, k_exp, log_exp, b0, alpha0, noise)
