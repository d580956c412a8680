"""Radial building blocks: the log-log profile, bubbles, cell profiles, kernels.

Radial ODEs are integrated in ``t = log r`` where ``Delta`` becomes
``r^-2 d^2/dt^2`` on radial functions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from .errors import BlowUp, DomainError

SQRT2 = math.sqrt(2.0)


def v_exact(r):
    """Closed-form radial solution ``-2 log(log(1/r) / sqrt 2)`` on ``0 < r < 1``."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0) or np.any(r >= 1):
        raise DomainError("v_exact needs 0 < r < 1")
    out = -2.0 * np.log(-np.log(r) / SQRT2)
    return float(out) if out.ndim == 0 else out


def v_exact_derivatives(r):
    """First and second r-derivatives of ``v_exact``."""
    r = np.asarray(r, dtype=float)
    ell = -np.log(r)
    d1 = 2.0 / (r * ell)
    d2 = -2.0 / (r**2 * ell) + 2.0 / (r**2 * ell**2)
    return d1, d2


def v_exact_residual(r):
    """``V'' + V'/r - e^V / r^2`` evaluated with closed-form derivatives."""
    d1, d2 = v_exact_derivatives(r)
    r = np.asarray(r, dtype=float)
    return d2 + d1 / r - np.exp(v_exact(r)) / r**2


def integrate_log_log(r_values, r_match=0.5, rtol=1e-13):
    """Integrate ``v_tt = e^v`` (``t = log r``) inward from data matched to
    ``v_exact`` at ``r_match``; returns values at ``r_values``."""
    r_values = np.asarray(r_values, dtype=float)
    t_eval = np.log(r_values)
    t0 = math.log(r_match)
    v0 = v_exact(r_match)
    d1, _ = v_exact_derivatives(r_match)
    order = np.argsort(-t_eval)
    sol = solve_ivp(
        lambda t, y: [y[1], math.exp(y[0])],
        (t0, float(t_eval.min())),
        [v0, float(d1) * r_match],
        method="DOP853",
        rtol=rtol,
        atol=1e-14,
        t_eval=t_eval[order],
    )
    out = np.empty_like(t_eval)
    out[order] = sol.y[0]
    return out


@dataclass(frozen=True)
class BubbleConfig:
    lam: float
    delta: float
    center_offset: tuple = (0.0, 0.0)
    cutoff_inner: float = 1.0
    cutoff_outer: float = 2.0

    def __post_init__(self):
        if not (self.lam > 0 and self.delta > 0):
            raise DomainError("lambda and delta must be positive")
        if not (0 < self.cutoff_inner < self.cutoff_outer):
            raise DomainError("cutoff radii must satisfy 0 < inner < outer")
        object.__setattr__(self, "center_offset", tuple(float(v) for v in self.center_offset))

    @property
    def epsilon(self) -> float:
        return self.lam * self.delta

    @property
    def center(self) -> np.ndarray:
        """Bubble center relative to its concentration point."""
        return self.epsilon * np.asarray(self.center_offset)


def bubble(cfg: BubbleConfig, x):
    """``log(8 delta^2 / (eps^2 + |x - eps k|^2)^2)``; ``x`` has trailing axis 2."""
    x = np.asarray(x, dtype=float)
    rho2 = np.sum((x - cfg.center) ** 2, axis=-1)
    out = math.log(8.0 * cfg.delta**2) - 2.0 * np.log(cfg.epsilon**2 + rho2)
    return float(out) if out.ndim == 0 else out


def bubble_laplacian(cfg: BubbleConfig, x):
    """Closed-form Laplacian of ``bubble``."""
    x = np.asarray(x, dtype=float)
    rho2 = np.sum((x - cfg.center) ** 2, axis=-1)
    return -8.0 * cfg.epsilon**2 / (cfg.epsilon**2 + rho2) ** 2


def bubble_mass(cfg: BubbleConfig, radius: float) -> float:
    """``lambda^2`` times the integral of ``e^w`` over a disk about the center."""
    eps2 = cfg.epsilon**2
    return 8.0 * math.pi * radius**2 / (radius**2 + eps2)


def kernel_z(i: int, z):
    """Kernel functions of the linearized bubble operator.

    ``z0 = 2(1 - |z|^2)/(1 + |z|^2)`` (dilation) and ``z_i = -4 z_i/(1 + |z|^2)``
    (translations).  Another common normalization of the dilation kernel is
    ``(|z|^2 - 1)/(|z|^2 + 1) = -z0/2``; only the span matters.
    """
    z = np.asarray(z, dtype=float)
    q = np.sum(z**2, axis=-1)
    if i == 0:
        out = 2.0 * (1.0 - q) / (1.0 + q)
    elif i in (1, 2):
        out = -4.0 * z[..., i - 1] / (1.0 + q)
    else:
        raise DomainError(f"kernel index must be 0, 1 or 2, got {i}")
    return float(out) if np.ndim(out) == 0 else out


def linearized_potential(z):
    """Potential ``8/(1+|z|^2)^2`` of the limit operator ``Delta + 8/(1+|z|^2)^2``."""
    q = np.sum(np.asarray(z, dtype=float) ** 2, axis=-1)
    return 8.0 / (1.0 + q) ** 2


def select_delta(lam: float, H_at_p: float) -> float:
    """Bubble scale ``0.5 e^{H/2} / |log lam|``."""
    if not (0 < lam < 1):
        raise DomainError("select_delta needs 0 < lambda < 1")
    T = abs(math.log(lam))
    delta = 0.5 * math.exp(0.5 * H_at_p) / T
    lhs = math.log(8.0 * delta**2)
    rhs = -2.0 * math.log(T / SQRT2) + H_at_p
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs)), (lhs, rhs)
    return delta


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Dense solution of a radial ODE in ``t = log r``.

    ``t`` and ``values``/``derivs`` are the accepted integrator nodes.  Below
    ``t_floor`` the profile takes ``floor_value`` (used for extension by zero).
    """

    t: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    validity: tuple
    residual: float
    blowup: float | None = None
    energy_drift: float | None = None
    interpolant: object = field(default=None, repr=False)
    t_floor: float = -np.inf
    floor_value: float = 0.0

    def __post_init__(self):
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("profile abscissae must be strictly increasing")

    def __call__(self, t):
        """Profile value at ``t`` (log-radius), honoring the floor extension."""
        t = np.asarray(t, dtype=float)
        lo, hi = self.validity
        if np.any(t > hi + 1e-12):
            raise DomainError(f"profile evaluated beyond its validity endpoint t={hi}")
        tc = np.clip(t, max(lo, self.t_floor), hi)
        v = self.interpolant(tc.ravel())[0].reshape(tc.shape)
        v = np.where(t < self.t_floor, self.floor_value, v)
        v = np.where((t < lo) & (t >= self.t_floor), self.values[0], v)
        return float(v) if v.ndim == 0 else v

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        lo, hi = self.validity
        tc = np.clip(t, max(lo, self.t_floor), hi)
        d = self.interpolant(tc.ravel())[1].reshape(tc.shape)
        d = np.where((t < self.t_floor) | (t < lo), 0.0, d)
        return float(d) if d.ndim == 0 else d

    def raw(self, t):
        """Integrator solution without the floor extension."""
        t = np.asarray(t, dtype=float)
        return self.interpolant(t.ravel())[0].reshape(t.shape)

    def to_csv(self, path, in_radius=False):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r" if in_radius else "t", "value"])
            for t, v in zip(self.t, self.values):
                w.writerow([f"{math.exp(t) if in_radius else t:.17g}", f"{v:.17g}"])
        return path


_V_CAP = 40.0


def _ode_residual(interp, t, coeff, hs=1e-5, v_max=20.0):
    """Relative residual of ``F_tt = coeff(t) e^F`` at step midpoints with ``F <= v_max``."""
    tm = 0.5 * (t[1:] + t[:-1])
    ym = interp(tm)
    keep = ym[0] <= v_max
    tm, ym = tm[keep], ym[:, keep]
    if tm.size == 0:
        return 0.0
    ypp = (interp(tm + hs)[1] - interp(tm - hs)[1]) / (2 * hs)
    target = coeff(tm) * np.exp(ym[0])
    return float(np.max(np.abs(ypp - target) / np.maximum(1.0, np.abs(target))))


def cell_blowup_time(delta: float) -> float:
    """Closed-form forward blow-up coordinate of the cell ODE."""
    return math.log(1.0 / delta) + math.pi / (SQRT2 * delta)


def solve_cell(delta: float, t_max: float | None = None, *, rtol=1e-13) -> RadialProfile:
    """Integrate ``F_tt = delta^2 e^F`` from ``F = F_t = 0`` at ``t0 = log(1/delta)``.

    The trajectory is integrated in both directions from ``t0`` (it is even
    about ``t0``); evaluation below ``t0`` returns the extension by zero.
    Without ``t_max`` the forward leg runs until ``F`` reaches a large cap, and
    the blow-up coordinate is completed with the exact tail of the energy
    quadrature.
    """
    if not (0 < delta < 0.5):
        raise DomainError("solve_cell needs 0 < delta < 1/2")
    t0 = math.log(1.0 / delta)
    d2 = delta**2

    def rhs(t, y):
        return [y[1], d2 * math.exp(y[0])]

    def cap(t, y):
        return y[0] - _V_CAP

    cap.terminal = True
    span = math.pi / (SQRT2 * delta)
    fwd = solve_ivp(rhs, (t0, t0 + 2 * span), [0.0, 0.0], method="DOP853", rtol=rtol, atol=1e-15,
                    events=cap, dense_output=True)
    t_cap = float(fwd.t_events[0][0])
    t_star = t_cap + SQRT2 * math.asin(math.exp(-0.5 * _V_CAP)) / delta
    if t_max is not None and t_max >= t_star:
        raise BlowUp(t_star)
    t_end = t_cap if t_max is None else t_max
    fwd = solve_ivp(rhs, (t0, t_end), [0.0, 0.0], method="DOP853", rtol=rtol, atol=1e-15, dense_output=True)
    back_end = 2 * t0 - t_end
    bwd = solve_ivp(rhs, (t0, back_end), [0.0, 0.0], method="DOP853", rtol=rtol, atol=1e-15, dense_output=True)

    t = np.concatenate([bwd.t[::-1][:-1], fwd.t])
    y = np.concatenate([bwd.y[:, ::-1][:, :-1], fwd.y], axis=1)

    def interp(tq):
        tq = np.asarray(tq, dtype=float)
        out = np.empty((2, tq.size))
        m = tq >= t0
        if m.any():
            out[:, m] = fwd.sol(tq[m])
        if (~m).any():
            out[:, ~m] = bwd.sol(tq[~m])
        return out

    energy = 0.5 * y[1] ** 2 - d2 * np.expm1(y[0])
    scale = np.maximum(1.0, d2 * np.exp(y[0]))
    drift = float(np.max(np.abs(energy) / scale))
    res = _ode_residual(interp, t, lambda tt: np.full_like(tt, d2))
    return RadialProfile(
        t=t,
        values=y[0],
        derivs=y[1],
        validity=(float(t[0]), float(t[-1])),
        residual=res,
        blowup=t_star,
        energy_drift=drift,
        interpolant=interp,
        t_floor=t0,
        floor_value=0.0,
    )


def solve_matched_cell(lam: float, delta: float, weight, r_max: float, *, rtol=1e-11) -> RadialProfile:
    """Correction profile ``F`` for a bubble sitting on a zero of ``f``.

    Solves ``F_tt = r^2 fbar(r) e^{w(r)} e^F`` in ``t = log r`` (physical
    radius) with ``F -> 0`` as ``r -> 0``, where ``w`` is the bubble of scale
    ``delta`` and ``fbar = weight(r)`` the angular mean of ``f``.  Near the core
    the forcing is ``O(r^4 / eps^4)``, so the zero data at ``t_start`` are
    accurate to rounding.
    """
    eps = lam * delta
    t_start = math.log(eps) - 9.0
    t_end = math.log(r_max)
    c8 = 8.0 * delta**2

    def forcing(t):
        r = math.exp(t)
        return r * r * float(weight(r)) * c8 / (eps * eps + r * r) ** 2

    def rhs(t, y):
        return [y[1], forcing(t) * math.exp(y[0])]

    def cap(t, y):
        return y[0] - _V_CAP

    cap.terminal = True
    sol = solve_ivp(rhs, (t_start, t_end), [0.0, 0.0], method="DOP853", rtol=rtol, atol=1e-14,
                    events=cap, dense_output=True)
    if sol.status == 1:
        raise BlowUp(float(sol.t_events[0][0]))

    def interp(tq):
        return sol.sol(np.asarray(tq, dtype=float))

    res = _ode_residual(interp, sol.t, lambda tt: np.array([forcing(v) for v in tt]))
    return RadialProfile(
        t=sol.t,
        values=sol.y[0],
        derivs=sol.y[1],
        validity=(float(sol.t[0]), float(sol.t[-1])),
        residual=res,
        interpolant=interp,
    )
