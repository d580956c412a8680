"""Linearized operator about the glued approximation and its projected inverse.

Everything is assembled on the global periodic grid in the original variable:
the linearization is ``A = Delta - (f - lambda^2) e^U`` and a chart-``j``
source ``h(y)`` corresponds to ``h / eps_j^2`` in the original variable.  The
projected problem

    A phi = g + sum_{j,i} c_ij chi_j Z_ij / eps_j^2,   <chi_j Z_ij, phi> = 0,

is the chart-wise problem ``L phi = h + sum c chi Z`` with orthogonality to the
two translation kernels of every bubble.  The dilation kernel is not
projected out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np

from .errors import DomainError, SingularSystem
from .green import quintic_cutoff
from .grid import DIRECT_LIMIT, Grid2D, OperatorSolver, ScalarField, helmholtz_matrix, laplacian_values
from .radial import kernel_z, linearized_potential

if TYPE_CHECKING:
    from .ansatz import Ansatz


@dataclass(frozen=True, eq=False)
class StarNorm:
    """Weighted sup norm with weight ``max(eps^2, |y|^(-2-sigma))`` per chart.

    Each grid node belongs to the chart of its nearest concentration point;
    the norm is the sum of the chart norms.
    """

    grid: Grid2D
    centers: tuple
    epsilons: tuple
    sigma: float = 0.5

    def __post_init__(self):
        if not (0 < self.sigma < 1):
            raise DomainError("sigma must lie in (0, 1)")
        if len(self.centers) != len(self.epsilons):
            raise DomainError("one epsilon per chart")

    @classmethod
    def for_ansatz(cls, ans: "Ansatz", sigma=0.5) -> "StarNorm":
        return cls(ans.grid, tuple(np.asarray(p) for p in ans.points), tuple(ans.epsilons), sigma)

    @cached_property
    def _distances(self):
        return np.stack([self.grid.distance(p) for p in self.centers])

    @cached_property
    def regions(self) -> np.ndarray:
        """Chart label of every node."""
        return np.argmin(self._distances, axis=0)

    def weight(self, j) -> np.ndarray:
        eps = self.epsilons[j]
        y = self._distances[j] / eps
        with np.errstate(divide="ignore"):
            return np.maximum(eps**2, y ** (-2.0 - self.sigma))

    def chart_norm(self, h, j) -> float:
        h = np.asarray(getattr(h, "values", h))
        mask = self.regions == j
        return float(np.max(np.abs(h[mask]) / self.weight(j)[mask]))

    def __call__(self, h) -> float:
        """``h`` is one array used for every chart or a sequence of per-chart arrays."""
        if isinstance(h, (list, tuple)):
            if len(h) != len(self.centers):
                raise DomainError("one field per chart is required")
            return sum(self.chart_norm(hj, j) for j, hj in enumerate(h))
        return sum(self.chart_norm(h, j) for j in range(len(self.centers)))

    def from_original(self, g) -> list:
        """Per-chart versions ``eps_j^2 g`` of an original-variable source."""
        g = np.asarray(getattr(g, "values", g))
        return [e**2 * g for e in self.epsilons]

    def original_norm(self, g) -> float:
        return self(self.from_original(g))


def star_norm(h, sn: StarNorm) -> float:
    return sn(h)


def apply_L(ans: "Ansatz", j: int, phi) -> ScalarField:
    """Chart-``j`` linearized operator ``eps_j^2 (Delta phi - (f - lambda^2) e^U phi)``."""
    phi = np.asarray(getattr(phi, "values", phi), dtype=float)
    out = laplacian_values(phi, ans.grid.h) - ans.potential() * phi
    return ScalarField(ans.grid, ans.bubbles[j].epsilon ** 2 * out)


def kernel_fields(ans: "Ansatz", chi_radius=5.0):
    """``chi_j`` and translation kernels ``Z_1j, Z_2j`` centred at the bubble centres."""
    out = []
    for p, b in zip(ans.points, ans.bubbles):
        dx, dy = ans.grid.displacement(np.asarray(p) + b.center)
        y = np.stack([dx, dy], -1) / b.epsilon
        rho = np.hypot(y[..., 0], y[..., 1])
        chi = quintic_cutoff(rho, chi_radius, chi_radius + 2.0)[0]
        out.append((chi, kernel_z(1, y), kernel_z(2, y)))
    return out


@dataclass
class ProjectedSolve:
    """Solution of the projected linear problem.

    ``c`` holds chart-normalized coefficients (shape ``(bubbles, 2)``);
    ``c_original`` the same numbers in the original variable.
    """

    phi: ScalarField
    c: np.ndarray
    c_original: np.ndarray
    constraints: np.ndarray
    residual: float
    source_norm: float
    ratio: float


class ProjectedSolver:
    """Factor the linearization once and solve projected problems by a Schur
    complement on the ``2 * bubbles`` constraint block."""

    def __init__(self, ans: "Ansatz", *, chi_radius=5.0, sigma=0.5, direct_limit=DIRECT_LIMIT):
        self.ans = ans
        grid = ans.grid
        self.h2 = grid.h**2
        pot = ans.potential()
        self.potential = pot
        # M = -A is positive except on a few bubble modes
        self.M = helmholtz_matrix(grid, pot)
        surrogate = helmholtz_matrix(grid, np.abs(pot)) if grid.n * grid.n > direct_limit else None
        self.solver = OperatorSolver(self.M, definite=False, surrogate=surrogate, direct_limit=direct_limit)
        self.norm = StarNorm.for_ansatz(ans, sigma)
        self.chi_radius = chi_radius
        cols = []
        for chi, z1, z2 in kernel_fields(ans, chi_radius):
            cols += [(chi * z1).ravel(), (chi * z2).ravel()]
        self.B = np.stack(cols, axis=1)
        self.W = np.stack([self.solver.solve(col) for col in cols], axis=1)
        self.S = self.h2 * (self.B.T @ self.W)
        sv = np.linalg.svd(self.S, compute_uv=False)
        self.singular_values = sv
        if sv[-1] <= 1e-13 * sv[0]:
            raise SingularSystem("constraint block is singular (translation modes collide)", float(sv[-1]))

    @property
    def eps(self):
        return np.array(self.ans.epsilons)

    def solve(self, g, rtol: float | None = None) -> ProjectedSolve:
        """Solve ``A phi = g + B c`` with ``B^T phi = 0`` for an original-variable source ``g``.

        ``rtol`` loosens the inner Krylov tolerance (ignored by the direct path).
        """
        g = np.asarray(getattr(g, "values", g), dtype=float)
        shape = g.shape
        phi_g = -self.solver.solve(g.ravel(), rtol=rtol)
        c_hat = np.linalg.solve(self.S, self.h2 * (self.B.T @ phi_g))
        phi = phi_g - self.W @ c_hat
        res_vec = -(self.M @ phi) - g.ravel() - self.B @ c_hat
        scale = max(np.linalg.norm(g.ravel()), np.linalg.norm(self.B @ c_hat), 1e-300)
        residual = float(np.linalg.norm(res_vec) / scale)
        constraints = self.h2 * (self.B.T @ phi)
        nb = len(self.ans.bubbles)
        c_orig = c_hat.reshape(nb, 2)
        c = c_orig * (self.eps**2)[:, None]
        hnorm = self.norm.original_norm(g)
        phi_max = float(np.max(np.abs(phi)))
        eps_min = float(self.eps.min())
        ratio = phi_max / (math.log(1.0 / eps_min) * hnorm) if hnorm > 0 else 0.0
        return ProjectedSolve(ScalarField(self.ans.grid, phi.reshape(shape), residual=residual), c, c_orig,
                              constraints, residual, hnorm, ratio)

    def recover_coefficients(self, sol: ProjectedSolve, g) -> np.ndarray:
        """Re-derive the chart coefficients by testing ``A phi - g`` against every
        ``chi Z``; agrees with ``sol.c`` when the solve is accurate."""
        g = np.asarray(getattr(g, "values", g), dtype=float).ravel()
        lhs = -(self.M @ sol.phi.values.ravel()) - g
        gram = self.h2 * (self.B.T @ self.B)
        c_hat = np.linalg.solve(gram, self.h2 * (self.B.T @ lhs))
        return c_hat.reshape(-1, 2) * (self.eps**2)[:, None]

    def conditioning(self) -> dict:
        return {"schur_singular_values": self.singular_values.tolist(),
                "schur_condition": float(self.singular_values[0] / self.singular_values[-1]),
                "direct": self.solver.direct}


def solve_projected(ans: "Ansatz", g, *, solver: ProjectedSolver | None = None, **kwargs) -> ProjectedSolve:
    solver = solver or ProjectedSolver(ans, **kwargs)
    return solver.solve(g)


def limit_operator_residual(i: int, n: int, half_width=6.0) -> float:
    """Max residual of the 5-point ``Delta z_i + 8 z_i/(1+|y|^2)^2`` on an
    ``n x n`` grid covering ``[-half_width, half_width]^2`` (interior nodes)."""
    y = np.linspace(-half_width, half_width, n)
    h = y[1] - y[0]
    Y1, Y2 = np.meshgrid(y, y, indexing="ij")
    pts = np.stack([Y1, Y2], -1)
    z = kernel_z(i, pts)
    lap = (z[2:, 1:-1] + z[:-2, 1:-1] + z[1:-1, 2:] + z[1:-1, :-2] - 4 * z[1:-1, 1:-1]) / h**2
    res = lap + linearized_potential(pts[1:-1, 1:-1]) * z[1:-1, 1:-1]
    return float(np.max(np.abs(res)))
