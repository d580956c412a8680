"""Uniform periodic grid, scalar fields and the elliptic solves built on them.

Nodes sit at ``x_i = i * h`` for ``i = 0..n-1`` on the square ``[0, L)^2``;
array axis 0 is the first coordinate.  All operators are periodic.
"""

from __future__ import annotations

import functools
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse import linalg as spla

from .errors import NoConvergence, SingularSystem

log = logging.getLogger(__name__)

# Largest system (unknown count) factored directly; above it the solver
# switches to algebraic multigrid preconditioned Krylov iterations.
DIRECT_LIMIT = 512 * 512


@dataclass(frozen=True)
class Grid2D:
    side_length: float
    n: int

    def __post_init__(self):
        if not (self.side_length > 0 and np.isfinite(self.side_length)):
            raise ValueError(f"side_length must be positive, got {self.side_length}")
        if self.n < 16 or self.n % 2:
            raise ValueError(f"n must be even and >= 16, got {self.n}")

    @property
    def h(self) -> float:
        return self.side_length / self.n

    @property
    def area(self) -> float:
        return self.side_length**2

    @property
    def coords(self) -> np.ndarray:
        return np.arange(self.n) * self.h

    def mesh(self):
        x = self.coords
        return np.meshgrid(x, x, indexing="ij")

    def wrap(self, d):
        """Reduce displacements to the minimal periodic image in [-L/2, L/2)."""
        L = self.side_length
        return (np.asarray(d, dtype=float) + 0.5 * L) % L - 0.5 * L

    def displacement(self, p):
        """Minimal-image displacement fields ``x - p`` for every node."""
        x = self.coords
        dx = self.wrap(x - p[0])
        dy = self.wrap(x - p[1])
        return np.broadcast_to(dx[:, None], (self.n, self.n)), np.broadcast_to(dy[None, :], (self.n, self.n))

    def distance(self, p):
        dx, dy = self.displacement(p)
        return np.hypot(dx, dy)

    def periodic_distance(self, a, b) -> float:
        d = self.wrap(np.subtract(a, b))
        return float(np.hypot(d[0], d[1]))

    def zeros(self) -> "ScalarField":
        return ScalarField(self, np.zeros((self.n, self.n)))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Grid samples of a real function.  ``residual`` is set by solvers."""

    grid: Grid2D
    values: np.ndarray
    residual: float | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"values shape {v.shape} does not match grid n={self.grid.n}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __add__(self, other):
        return ScalarField(self.grid, self.values + _raw(other))

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - _raw(other))

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * _raw(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)


def _raw(x):
    return x.values if isinstance(x, ScalarField) else x


def laplacian_values(values: np.ndarray, h: float) -> np.ndarray:
    return (
        np.roll(values, 1, 0) + np.roll(values, -1, 0) + np.roll(values, 1, 1) + np.roll(values, -1, 1) - 4.0 * values
    ) / h**2


def laplacian(f: ScalarField) -> ScalarField:
    return ScalarField(f.grid, laplacian_values(f.values, f.grid.h))


def integrate(f: ScalarField) -> float:
    return float(f.values.sum() * f.grid.h**2)


@functools.lru_cache(maxsize=8)
def laplacian_matrix(grid: Grid2D) -> sp.csr_matrix:
    """Sparse 5-point periodic Laplacian in row-major (C) ordering."""
    n, h = grid.n, grid.h
    idx = np.arange(n * n).reshape(n, n)
    rows = np.repeat(idx.ravel(), 5)
    cols = np.stack(
        [
            idx,
            np.roll(idx, 1, 0),
            np.roll(idx, -1, 0),
            np.roll(idx, 1, 1),
            np.roll(idx, -1, 1),
        ],
        axis=-1,
    ).ravel()
    vals = np.tile(np.array([-4.0, 1.0, 1.0, 1.0, 1.0]) / h**2, n * n)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n))


def _laplacian_symbol(grid: Grid2D) -> np.ndarray:
    """Eigenvalues of -Laplacian (5-point) on the FFT basis."""
    k = np.arange(grid.n)
    s = 4.0 * np.sin(np.pi * k / grid.n) ** 2 / grid.h**2
    return s[:, None] + s[None, :]


def _amg(matrix):
    import pyamg

    return pyamg.ruge_stuben_solver(sp.csr_matrix(matrix), max_coarse=500).aspreconditioner(cycle="V")


class OperatorSolver:
    """Reusable solver for one sparse operator.

    Small systems are LU-factored once.  Large ones use classical
    (Ruge-Stuben) AMG as the preconditioner of CG (``definite=True``) or
    restarted GMRES.  For the indefinite case the hierarchy is built on the
    operator itself, which is only mildly indefinite here; ``surrogate`` (an
    SPD matrix close to ``matrix``) takes over if that hierarchy fails or a
    solve stalls.
    """

    def __init__(
        self,
        matrix,
        *,
        definite=False,
        surrogate=None,
        direct_limit=DIRECT_LIMIT,
        rtol=1e-11,
        maxiter=400,
    ):
        self.matrix = sp.csr_matrix(matrix)
        self.definite = definite
        self.rtol = rtol
        self.maxiter = maxiter
        self.surrogate = surrogate
        size = self.matrix.shape[0]
        self._lu = None
        self._precond = None
        if definite and size > 128 * 128:
            self._precond = _amg(self.matrix if surrogate is None else surrogate)
        elif size <= direct_limit:
            try:
                self._lu = spla.splu(self.matrix.tocsc(), permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise SingularSystem(f"factorization failed: {exc}", 0.0) from exc
        else:
            try:
                self._precond = _amg(self.matrix)
            except (ValueError, ArithmeticError, np.linalg.LinAlgError):
                if surrogate is None:
                    raise
                self._use_surrogate()

    def _use_surrogate(self):
        self._precond = _amg(self.surrogate)
        self.surrogate = None

    @property
    def direct(self) -> bool:
        return self._lu is not None

    def solve(self, b: np.ndarray, rtol: float | None = None) -> np.ndarray:
        """Solve ``matrix @ x = b`` to relative residual ``rtol`` (default: the solver's)."""
        rtol = self.rtol if rtol is None else max(float(rtol), self.rtol)
        b = np.asarray(b, dtype=float)
        shape = b.shape
        rhs = b.ravel()
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0.0:
            return np.zeros(shape)
        if self._lu is not None:
            x = self._lu.solve(rhs)
            for _ in range(2):
                r = rhs - self.matrix @ x
                if np.linalg.norm(r) <= rtol * bnorm:
                    break
                x = x + self._lu.solve(r)
        else:
            try:
                x = self._krylov(rhs, bnorm, rtol)
            except NoConvergence:
                if self.definite or self.surrogate is None:
                    raise
                log.info("switching to the surrogate preconditioner")
                self._use_surrogate()
                x = self._krylov(rhs, bnorm, rtol)
        res = np.linalg.norm(rhs - self.matrix @ x) / bnorm
        if not np.isfinite(res) or res > max(10 * rtol, 1e-10):
            raise NoConvergence(f"linear solve residual {res:.3e} above tolerance", [res])
        return x.reshape(shape)

    def _krylov(self, rhs, bnorm, rtol):
        history = []
        x = np.zeros_like(rhs)
        for _ in range(4):
            r = rhs - self.matrix @ x
            rn = np.linalg.norm(r)
            history.append(rn / bnorm)
            if rn <= rtol * bnorm:
                break
            if self.definite:
                dx, info = spla.cg(self.matrix, r, rtol=rtol * bnorm / rn / 4, atol=0.0,
                                   maxiter=self.maxiter, M=self._precond)
            else:
                dx, info = spla.gmres(self.matrix, r, rtol=rtol * bnorm / rn / 4, atol=0.0,
                                      restart=60, maxiter=self.maxiter // 60 + 1, M=self._precond)
            if not np.all(np.isfinite(dx)):
                raise NoConvergence("Krylov iterate became non-finite", history)
            x = x + dx
        else:
            history.append(np.linalg.norm(rhs - self.matrix @ x) / bnorm)
        if history[-1] > max(1e-6, 10 * rtol):
            raise NoConvergence("Krylov iteration stalled", history)
        return x


def helmholtz_matrix(grid: Grid2D, c) -> sp.csr_matrix:
    """Assemble ``-Laplacian + diag(c)``."""
    c = np.broadcast_to(_raw(c), (grid.n, grid.n)).ravel()
    return (-laplacian_matrix(grid) + sp.diags(c)).tocsr()


def _fft_solve(grid: Grid2D, shift: float, rhs: np.ndarray) -> np.ndarray:
    symbol = _laplacian_symbol(grid) + shift
    rhat = np.fft.fft2(rhs)
    if shift == 0.0:
        symbol = symbol.copy()
        symbol[0, 0] = 1.0
        rhat[0, 0] = 0.0
    return np.real(np.fft.ifft2(rhat / symbol))


def solve_helmholtz(c, rhs: ScalarField, *, tol: float = 1e-10) -> ScalarField:
    """Solve ``(-Laplacian + c) phi = rhs`` with ``c >= 0``.

    ``c`` may be a scalar or a field.  With ``c == 0`` the zero-mean solution
    is returned and ``rhs`` must have (numerically) zero mean.
    """
    grid = rhs.grid
    b = rhs.values
    cv = np.asarray(_raw(c), dtype=float)
    if np.any(cv < 0):
        raise ValueError("solve_helmholtz requires c >= 0")
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    if np.all(cv == cv.flat[0]):
        shift = float(cv.flat[0])
        if shift == 0.0:
            mean = float(b.mean())
            if abs(mean) > 1e-10 * max(scale, np.finfo(float).tiny):
                raise SingularSystem(f"rhs mean {mean:.3e} incompatible with pure Laplacian", 0.0)
            b = b - mean
        phi = _fft_solve(grid, shift, b)
        matrix_free = True
    else:
        matrix_free = False
        A = helmholtz_matrix(grid, cv)
        solver = OperatorSolver(A, definite=True, rtol=tol / 10)
        phi = solver.solve(b)
    lhs = -laplacian_values(phi, grid.h) + cv * phi
    res = float(np.max(np.abs(lhs - b))) / max(scale, np.finfo(float).tiny)
    if res > tol:
        if matrix_free:
            # one refinement sweep removes FFT round-off on extreme scales
            phi = phi + _fft_solve(grid, float(cv.flat[0]), b - lhs)
            lhs = -laplacian_values(phi, grid.h) + cv * phi
            res = float(np.max(np.abs(lhs - b))) / max(scale, np.finfo(float).tiny)
        if res > tol:
            raise NoConvergence(f"Helmholtz residual {res:.3e} above {tol:.1e}", [res])
    return ScalarField(grid, phi, residual=res)


def _cubic_weights(t):
    return np.stack(
        [
            -t * (t - 1.0) * (t - 2.0) / 6.0,
            (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
            -(t + 1.0) * t * (t - 2.0) / 2.0,
            (t + 1.0) * t * (t - 1.0) / 6.0,
        ]
    )


def sample(f: ScalarField, points) -> np.ndarray | float:
    """Periodic bicubic (tensor cubic Lagrange) interpolation.

    ``points`` is a pair or an array of shape (..., 2).  Exact at nodes and for
    locally cubic data.
    """
    pts = np.asarray(points, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    grid = f.grid
    n = grid.n
    s = (pts % grid.side_length) / grid.h
    snapped = np.round(s)
    s = np.where(np.abs(s - snapped) < 1e-11, snapped, s)
    i0 = np.floor(s).astype(np.int64)
    t = s - i0
    wx = _cubic_weights(t[..., 0])
    wy = _cubic_weights(t[..., 1])
    out = np.zeros(pts.shape[:-1])
    v = f.values
    for a in range(4):
        ia = (i0[..., 0] + a - 1) % n
        row = np.zeros(pts.shape[:-1])
        for b in range(4):
            ib = (i0[..., 1] + b - 1) % n
            row += wy[b] * v[ia, ib]
        out += wx[a] * row
    return float(out[0]) if scalar else out


def resample(f: ScalarField, grid: Grid2D) -> ScalarField:
    """Interpolate ``f`` onto another grid of the same side length."""
    if grid == f.grid:
        return f
    X, Y = grid.mesh()
    return ScalarField(grid, sample(f, np.stack([X, Y], axis=-1)))


_MAGIC = b"bubbling-field"


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_field(path, f: ScalarField, fmt: str = "binary") -> Path:
    """Write a field as raw little-endian float64 or CSV, each with a header line."""
    path = Path(path)
    grid = f.grid
    if fmt == "binary":
        header = b"%s L=%s n=%d\n" % (_MAGIC, repr(float(grid.side_length)).encode(), grid.n)
        payload = header + np.ascontiguousarray(f.values, dtype="<f8").tobytes()
    elif fmt == "csv":
        lines = [f"# L={float(grid.side_length)!r} n={grid.n}"]
        lines += [",".join(f"{v:.17g}" for v in row) for row in f.values]
        payload = ("\n".join(lines) + "\n").encode()
    else:
        raise ValueError(f"unknown field format {fmt!r}")
    _atomic_write(path, payload)
    return path


def _parse_header(text: str):
    parts = dict(item.split("=", 1) for item in text.split() if "=" in item)
    return float(parts["L"]), int(parts["n"])


def read_field(path) -> ScalarField:
    raw = Path(path).read_bytes()
    if raw.startswith(_MAGIC):
        head, _, body = raw.partition(b"\n")
        L, n = _parse_header(head.decode())
        values = np.frombuffer(body, dtype="<f8")
        if values.size != n * n:
            raise ValueError(f"field file holds {values.size} values, expected {n * n}")
        return ScalarField(Grid2D(L, n), values.reshape(n, n))
    text = raw.decode()
    head, _, body = text.partition("\n")
    if not head.startswith("#"):
        raise ValueError("unrecognized field file")
    L, n = _parse_header(head.lstrip("# "))
    values = np.loadtxt(body.splitlines(), delimiter=",", ndmin=2)
    return ScalarField(Grid2D(L, n), values)
