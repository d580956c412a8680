"""Curvature data: analytic families of ``f``, problem container, validation,
and the key-value configuration format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadPoints, BadProblem, ConfigError
from .grid import Grid2D, ScalarField

FAMILIES = ("product-of-wells", "radial", "zero")


@dataclass(frozen=True)
class Well:
    point: tuple
    anisotropy: tuple = ((1.0, 0.0), (0.0, 1.0))
    tilt: tuple = (0.0, 0.0)

    def __post_init__(self):
        a = np.asarray(self.anisotropy, dtype=float)
        if a.shape != (2, 2) or not np.allclose(a, a.T):
            raise BadProblem("anisotropy must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(a).min() <= 0:
            raise BadProblem("anisotropy must be positive definite")
        object.__setattr__(self, "point", tuple(float(v) for v in self.point))
        object.__setattr__(self, "anisotropy", tuple(tuple(float(v) for v in row) for row in a))
        object.__setattr__(self, "tilt", tuple(float(v) for v in self.tilt))


@dataclass(frozen=True)
class CurvatureFunction:
    """Analytic nonnegative ``f`` on the periodic square.

    ``product-of-wells``: ``beta * prod_j q_j(x) g_j(x)`` where ``q_j`` is a
    periodic positive-definite quadratic form in ``(L/pi) sin(pi dx/L)`` that
    vanishes only at ``p_j`` and ``g_j = 1 + tilt . (L/2pi) sin(2pi dx/L)`` adds
    a parity-breaking cubic term.  ``radial``: ``beta * prod_j R^2 (1 - exp(-r_j^2/R^2))``.
    ``zero``: ``f = 0``.
    """

    family: str
    beta: float
    wells: tuple
    side_length: float = 1.0
    radial_scale: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise BadProblem(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.beta < 0:
            raise BadProblem("beta must be nonnegative")
        L = self.side_length
        for w in self.wells:
            t = np.asarray(w.tilt)
            if np.abs(t).sum() * L / (2 * math.pi) >= 1.0:
                raise BadProblem("tilt too large: well factor would change sign")

    @property
    def points(self):
        return [np.array(w.point) for w in self.wells]

    def _wrap(self, d):
        L = self.side_length
        return (d + 0.5 * L) % L - 0.5 * L

    def _factor(self, w: Well, x):
        L = self.side_length
        d = self._wrap(x - np.asarray(w.point))
        if self.family == "radial":
            R = self.radial_scale
            return -R * R * np.expm1(-np.sum(d * d, axis=-1) / (R * R))
        a = np.asarray(w.anisotropy)
        s = (L / math.pi) * np.sin(math.pi * d / L)
        c = np.cos(math.pi * d / L)
        q = a[0, 0] * s[..., 0] ** 2 + a[1, 1] * s[..., 1] ** 2 + 2 * a[0, 1] * s[..., 0] * s[..., 1] * c[..., 0] * c[..., 1]
        g = 1.0 + (L / (2 * math.pi)) * (w.tilt[0] * np.sin(2 * math.pi * d[..., 0] / L) + w.tilt[1] * np.sin(2 * math.pi * d[..., 1] / L))
        return q * g

    def __call__(self, x):
        """Evaluate at points with trailing axis 2."""
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], float(self.beta))
        if self.family == "zero":
            return np.zeros(x.shape[:-1])
        for w in self.wells:
            out = out * self._factor(w, x)
        return out

    def others(self, j, x):
        """Product of every factor except well ``j`` (times beta)."""
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], float(self.beta))
        for i, w in enumerate(self.wells):
            if i != j:
                out = out * self._factor(w, x)
        return out

    def quotient(self, j, r, u):
        """``f(p_j + r u) / r^2`` for unit directions ``u``, stable down to ``r = 0``."""
        r = np.asarray(r, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.family == "zero":
            return np.zeros(r.shape)
        L = self.side_length
        w = self.wells[j]
        d = r[..., None] * u
        if self.family == "radial":
            z = (r / self.radial_scale) ** 2
            own = np.where(z > 0, -np.expm1(-z) / np.where(z > 0, z, 1.0), 1.0)
        else:
            a = np.asarray(w.anisotropy)
            sc = np.sinc(d / L)
            c = np.cos(math.pi * d / L)
            own = (a[0, 0] * (u[..., 0] * sc[..., 0]) ** 2 + a[1, 1] * (u[..., 1] * sc[..., 1]) ** 2
                   + 2 * a[0, 1] * u[..., 0] * u[..., 1] * sc[..., 0] * sc[..., 1] * c[..., 0] * c[..., 1])
            own = own * (1.0 + (L / (2 * math.pi)) * (w.tilt[0] * np.sin(2 * math.pi * d[..., 0] / L)
                                                      + w.tilt[1] * np.sin(2 * math.pi * d[..., 1] / L)))
        return own * self.others(j, np.asarray(w.point) + d)

    def hessian(self, j) -> np.ndarray:
        """Exact Hessian at ``p_j``."""
        if self.family == "zero":
            return np.zeros((2, 2))
        w = self.wells[j]
        rest = float(self.others(j, np.asarray(w.point)))
        a = np.eye(2) if self.family == "radial" else np.asarray(w.anisotropy)
        return 2.0 * rest * a

    def on_grid(self, grid: Grid2D) -> np.ndarray:
        X, Y = grid.mesh()
        return self(np.stack([X, Y], axis=-1))

    def angular_mean(self, p, r, samples=64):
        """Mean of ``f`` over the circle of radius ``r`` about ``p``."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        th = 2 * math.pi * np.arange(samples) / samples
        pts = np.asarray(p)[None, None, :] + r[:, None, None] * np.stack([np.cos(th), np.sin(th)], -1)[None]
        return self(pts).mean(axis=1)


def build_f(points, weights=1.0, family="product-of-wells", *, side_length=1.0, anisotropy=None, tilt=None,
            radial_scale=0.1, min_separation=None) -> CurvatureFunction:
    """Assemble an analytic ``f`` whose zeros are exactly ``points``."""
    pts = [tuple(float(c) % side_length for c in p) for p in points]
    if not pts and family != "zero":
        raise BadPoints("at least one point is required")
    if min_separation is None:
        min_separation = 0.2 * side_length
    for i in range(len(pts)):
        for j in range(i):
            d = np.asarray(pts[i]) - np.asarray(pts[j])
            d = (d + 0.5 * side_length) % side_length - 0.5 * side_length
            if math.hypot(*d) < min_separation:
                raise BadPoints(f"points {j} and {i} are {math.hypot(*d):.4g} apart (< {min_separation:.4g})")
    anisotropy = anisotropy or [None] * len(pts)
    tilt = tilt or [None] * len(pts)
    if len(anisotropy) != len(pts) or len(tilt) != len(pts):
        raise BadProblem("anisotropy/tilt lists must match the number of points")
    wells = tuple(
        Well(p, **({} if a is None else {"anisotropy": a}), **({} if t is None else {"tilt": t}))
        for p, a, t in zip(pts, anisotropy, tilt)
    )
    return CurvatureFunction(family, float(weights), wells, float(side_length), float(radial_scale))


@dataclass(frozen=True, eq=False)
class CurvatureProblem:
    grid: Grid2D
    f: CurvatureFunction
    alpha: float = 1.0
    lam: float = 0.0
    bubble_indices: tuple | None = None

    def __post_init__(self):
        if not self.alpha >= 0:
            raise BadProblem("alpha must be nonnegative")
        if self.lam < 0:
            raise BadProblem("lambda must be nonnegative")
        if abs(self.f.side_length - self.grid.side_length) > 1e-14 * self.grid.side_length:
            raise BadProblem("f and grid disagree on the side length")
        idx = tuple(range(len(self.f.wells))) if self.bubble_indices is None else tuple(self.bubble_indices)
        if any(not 0 <= i < len(self.f.wells) for i in idx) or len(set(idx)) != len(idx):
            raise BadPoints(f"invalid bubble subset {idx}")
        object.__setattr__(self, "bubble_indices", idx)
        object.__setattr__(self, "_f_values", self.f.on_grid(self.grid))

    @property
    def f_field(self) -> ScalarField:
        return ScalarField(self.grid, self._f_values)

    @property
    def f_values(self) -> np.ndarray:
        return self._f_values

    @property
    def points(self):
        """Concentration points (the selected zeros of f)."""
        return [np.array(self.f.wells[i].point) for i in self.bubble_indices]

    @property
    def hessians(self):
        return [self.f.hessian(i) for i in self.bubble_indices]

    def kappa(self) -> ScalarField:
        return ScalarField(self.grid, self.lam**2 - self._f_values)

    def with_lambda(self, lam: float) -> "CurvatureProblem":
        return dataclasses.replace(self, lam=float(lam))

    def with_grid(self, n: int) -> "CurvatureProblem":
        return dataclasses.replace(self, grid=Grid2D(self.grid.side_length, int(n)))

    def require_admissible(self):
        """Raise BadProblem unless the hypotheses for the Green function hold."""
        f = self._f_values
        if np.min(f) < -1e-14:
            raise BadProblem("f must be nonnegative")
        for j, p in zip(self.bubble_indices, self.points):
            if float(self.f(p[None]) [0]) > 1e-12:
                raise BadProblem(f"f does not vanish at point {j}")
            if np.linalg.eigvalsh(self.f.hessian(j)).min() < 1e-6:
                raise BadProblem(f"Hessian of f at point {j} is not positive definite")


@dataclass
class ValidationReport:
    beta_bounds: list
    ratios: list
    checklist: dict

    @property
    def ok(self) -> bool:
        return all(self.checklist.values())


def validate(problem: CurvatureProblem, chart_radius: float | None = None, samples=(48, 64)) -> ValidationReport:
    """Chart-wise quadratic bounds ``b1 |x|^2 <= f <= b2 |x|^2`` and a hypothesis checklist."""
    f = problem.f
    L = problem.grid.side_length
    gamma = chart_radius if chart_radius is not None else 0.2 * L
    nr, nt = samples
    bounds, ratios = [], []
    rr = gamma * (np.arange(1, nr + 1) / nr)
    th = 2 * math.pi * np.arange(nt) / nt
    circle = np.stack([np.cos(th), np.sin(th)], -1)
    for p, hess in zip(problem.points, problem.hessians):
        pts = p[None, None, :] + rr[:, None, None] * circle[None]
        q = f(pts) / (rr[:, None] ** 2)
        # the limit r -> 0 is the Rayleigh quotient of the Hessian / 2
        eig = np.linalg.eigvalsh(hess) / 2.0
        b1 = float(min(q.min(), eig.min()))
        b2 = float(max(q.max(), eig.max()))
        bounds.append((b1, b2))
        ratios.append(b2 / b1 if b1 > 0 else math.inf)
    fv = problem.f_values
    check = {
        "f_nonnegative": bool(fv.min() >= -1e-14),
        "f_not_identically_zero": bool(fv.max() > 0),
        "min_f_is_zero": bool(abs(fv.min()) <= 1e-12 or all(float(f(p[None])[0]) <= 1e-12 for p in problem.points)),
        "f_vanishes_at_points": all(float(f(p[None])[0]) <= 1e-12 for p in problem.points),
        "hessians_positive_definite": all(np.linalg.eigvalsh(h).min() >= 1e-6 for h in problem.hessians),
        "alpha_positive": problem.alpha > 0,
    }
    return ValidationReport(bounds, ratios, check)


# ---------------------------------------------------------------- config


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _float_groups(text):
    return [_floats(g) for g in text.split(";") if g.strip()]


@dataclass
class RunConfig:
    side_length: float = 1.0
    n: int = 256
    alpha: float = 1.0
    lam: float = 0.05
    lambda_grid: tuple = ()
    family: str = "product-of-wells"
    beta: float = 1.5
    points: tuple = ((0.5, 0.5),)
    anisotropy: tuple = ()
    tilt: tuple = ()
    radial_scale: float = 0.1
    min_separation: float = 0.2
    bubble_points: tuple = ()
    green_n: int = 0
    chart_fraction: float = 0.5
    cutoff_inner: float = 0.5
    cutoff_outer: float = 1.0
    resolution_gate: float = 4.0
    delta_rule: str = "matched"
    sigma: float = 0.5
    chi_radius: float = 5.0
    fixed_point_tol: float = 1e-10
    reduced_tol: float = 1e-8
    newton_tol: float = 1e-10
    continuation_n: int = 64
    output_dir: str = "out"
    source: str | None = field(default=None, repr=False)

    def problem(self, lam=None, n=None) -> CurvatureProblem:
        m = len(self.points)
        aniso = None
        if self.anisotropy:
            if len(self.anisotropy) != m:
                raise ConfigError("anisotropy needs one 'a11 a12 a22' group per point")
            aniso = [((a11, a12), (a12, a22)) for a11, a12, a22 in self.anisotropy]
        tilt = list(self.tilt) if self.tilt else None
        f = build_f(self.points, self.beta, self.family, side_length=self.side_length, anisotropy=aniso, tilt=tilt,
                    radial_scale=self.radial_scale, min_separation=self.min_separation * self.side_length)
        grid = Grid2D(self.side_length, int(n if n is not None else self.n))
        subset = tuple(int(i) for i in self.bubble_points) or None
        return CurvatureProblem(grid, f, self.alpha, self.lam if lam is None else lam, subset)


_KEY_ALIASES = {"lambda": "lam", "L": "side_length"}


def _convert(name, text):
    kind = {f.name: f.type for f in dataclasses.fields(RunConfig)}[name]
    try:
        if name in ("points", "tilt"):
            groups = _float_groups(text)
            if any(len(g) != 2 for g in groups):
                raise ConfigError(f"{name}: each ';'-separated group needs 2 numbers")
            return tuple(tuple(g) for g in groups)
        if name == "anisotropy":
            groups = _float_groups(text)
            if any(len(g) != 3 for g in groups):
                raise ConfigError("anisotropy: each group needs 'a11 a12 a22'")
            return tuple(tuple(g) for g in groups)
        if name == "lambda_grid":
            return tuple(_floats(text))
        if name == "bubble_points":
            return tuple(int(v) for v in _floats(text))
        if kind == "int" or name in ("n", "green_n", "continuation_n"):
            return int(text)
        if kind == "float":
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def parse_config(text: str, source=None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"source"}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _KEY_ALIASES.get(key, key.replace("-", "_"))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, val)
    cfg = RunConfig(**values, source=source)
    if cfg.family not in FAMILIES:
        raise ConfigError(f"unknown family {cfg.family!r}")
    if cfg.delta_rule not in ("matched", "closed-form"):
        raise ConfigError("delta_rule must be 'matched' or 'closed-form'")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def config_to_text(cfg: RunConfig) -> str:
    """Serialize back to the key-value format (round-trips through parse_config)."""
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name == "source":
            continue
        v = getattr(cfg, f.name)
        key = "lambda" if f.name == "lam" else f.name
        if f.name in ("points", "tilt", "anisotropy"):
            text = "; ".join(" ".join(repr(float(c)) for c in g) for g in v)
        elif f.name in ("lambda_grid", "bubble_points"):
            text = ", ".join(repr(c) for c in v)
        else:
            text = repr(v) if isinstance(v, float) else str(v)
        if text == "":
            continue
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
