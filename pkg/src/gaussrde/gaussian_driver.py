"""Fractional Brownian drivers on a uniform grid and their Karhunen-Loeve basis.

The grid covariance matrix of a scalar fBM component, restricted to the
non-zero grid points t_1..t_K, is diagonalised once; the eigensystem gives
both an exact sampler and a concrete orthonormal basis of the (grid)
Cameron-Martin space.  Eigenvalues are reported in operator scale, i.e.
the matrix eigenvalues multiplied by the grid step, so that they approach
the continuum Karhunen-Loeve eigenvalues as the grid is refined.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidArgument, NumericalDegeneracy

#: Samples are generated in fixed-size chunks with one random stream per
#: chunk, so results do not depend on the number of workers.
CHUNK_SIZE = 512

#: Relative eigenvalue cut-off below which KL modes are discarded.
MODE_DROP_RTOL = 1e-14


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k T / K on [0, T]."""

    T: float
    K: int

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise InvalidArgument(f"horizon T must be positive, got {self.T}")
        if int(self.K) != self.K or self.K < 2:
            raise InvalidArgument(f"grid needs K >= 2 intervals, got {self.K}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "K", int(self.K))

    @property
    def dt(self):
        return self.T / self.K

    @property
    def points(self):
        return np.linspace(0.0, self.T, self.K + 1)

    def index_of(self, t):
        """Index of the grid point equal to ``t`` (within rounding)."""
        k = int(round(t / self.dt))
        if not (0 <= k <= self.K) or abs(k * self.dt - t) > 1e-9 * max(1.0, self.T):
            raise InvalidArgument(f"time {t} is not a point of the grid {self}")
        return k

    def refine(self, factor=2):
        return TimeGrid(self.T, self.K * factor)


@dataclass(frozen=True, eq=False)
class GridPath:
    """A continuous path in R^d sampled at the points of a ``TimeGrid``.

    Between grid points the path is understood to be linear.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.K + 1:
            raise InvalidArgument(
                f"expected values of shape ({self.grid.K + 1}, d), got {np.shape(self.values)}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("path values must be finite")
        if np.max(np.abs(v[0])) > 1e-12:
            raise InvalidArgument("grid paths must start at 0")
        v[0] = 0.0
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid, f):
        """Sample ``f(t)`` (vector valued, f(0) = 0) at the grid points."""
        return cls(grid, np.array([np.atleast_1d(f(t)) for t in grid.points]))

    @classmethod
    def zeros(cls, grid, d):
        return cls(grid, np.zeros((grid.K + 1, d)))

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def increments(self):
        return np.diff(self.values, axis=0)

    def _check(self, other):
        if not isinstance(other, GridPath):
            return NotImplemented
        if other.grid != self.grid or other.d != self.d:
            raise InvalidArgument("paths live on different grids or dimensions")
        return other

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return GridPath(self.grid, self.values + other.values)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return GridPath(self.grid, self.values - other.values)

    def __neg__(self):
        return GridPath(self.grid, -self.values)

    def __mul__(self, c):
        return GridPath(self.grid, float(c) * self.values)

    __rmul__ = __mul__


@dataclass(frozen=True)
class HurstModel:
    """Hurst parameter together with the rough path exponents it admits.

    ``rho = 1/(2H)`` is the 2D variation exponent of the covariance,
    ``p`` the rough path exponent (2 rho < p < 4), ``q`` the Young exponent
    of the Cameron-Martin paths (1/p + 1/q > 1).  Unspecified exponents are
    filled with admissible defaults.
    """

    H: float
    p: float | None = None
    q: float | None = None

    def __post_init__(self):
        H = float(self.H)
        if not (0.25 < H <= 0.5):
            raise InvalidArgument(f"Hurst parameter must lie in (1/4, 1/2], got {H}")
        rho = 1.0 / (2.0 * H)
        p = self.p
        if p is None:
            p = (2 * rho + 3.0) / 2 if 2 * rho < 3 else (2 * rho + 4.0) / 2
        p = float(p)
        if not (2 * rho < p < 4):
            raise InvalidArgument(f"p must lie in (2 rho, 4) = ({2 * rho:.4g}, 4), got {p}")
        q_lo = max(1.0, 1.0 / (H + 0.5))
        q_hi = min(2.0, p / (p - 1.0))
        q = self.q
        if q is None:
            q = 0.5 * (q_lo + q_hi)
        q = float(q)
        if not (1.0 <= q < 2.0 and 1.0 / p + 1.0 / q > 1.0):
            raise InvalidArgument(f"q={q} violates 1 <= q < 2, 1/p + 1/q > 1 for p={p}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def rho(self):
        return 1.0 / (2.0 * self.H)

    @property
    def level(self):
        return int(math.floor(self.p))


def fbm_covariance(s, t, H):
    """Covariance 1/2 (s^{2H} + t^{2H} - |t - s|^{2H}) of scalar fBM.

    Broadcasts over array arguments.
    """
    if not (0.0 < H < 1.0):
        raise InvalidArgument(f"Hurst parameter must lie in (0, 1), got {H}")
    s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    if np.any(s < 0) or np.any(t < 0):
        raise InvalidArgument("covariance is defined for non-negative times only")
    # one ufunc path for all three powers, so R(0, t) cancels exactly
    shape = s.shape
    s, t = np.atleast_1d(s), np.atleast_1d(t)
    h2 = 2.0 * H
    out = (0.5 * (np.power(s, h2) + np.power(t, h2) - np.power(np.abs(t - s), h2))).reshape(shape)
    return out if out.ndim else float(out)


def covariance_matrix(grid, H):
    """Covariance of (w_{t_1}, ..., w_{t_K}) for one scalar component."""
    tp = grid.points[1:]
    return fbm_covariance(tp[:, None], tp[None, :], H)


@lru_cache(maxsize=32)
def _grid_eigensystem(grid, H):
    sigma = covariance_matrix(grid, H)
    lam, U = np.linalg.eigh(sigma)
    lam, U = lam[::-1], U[:, ::-1]
    lam_max = lam[0]
    if lam[-1] < -1e-10 * lam_max:
        raise NumericalDegeneracy(
            f"grid covariance is not positive semidefinite: smallest eigenvalue {lam[-1]:.3e}")
    keep = lam > MODE_DROP_RTOL * lam_max
    lam, U = lam[keep], U[:, keep]
    # fix the sign of each eigenvector so that results are reproducible across LAPACK builds
    signs = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])])
    U = U * signs
    for a in (lam, U):
        a.setflags(write=False)
    return lam, U


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Grid Karhunen-Loeve eigensystem of fBM in R^d.

    ``eigenvalues[i]`` is the i-th operator-scale eigenvalue and
    ``eigenfunctions[i]`` the corresponding L^2-normalised eigenfunction on
    the grid.  The Cameron-Martin basis elements are
    ``h_i = sqrt(eigenvalue_i) * eigenfunction_i``; ``h_{i,j}`` places h_i in
    component j.
    """

    grid: TimeGrid
    H: float
    d: int
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    _matrix_eigenvalues: np.ndarray = field(repr=False)
    _eigenvectors: np.ndarray = field(repr=False)

    @property
    def n_max(self):
        return len(self.eigenvalues)

    @property
    def modes(self):
        """Cameron-Martin basis paths h_i on the grid, shape (n_max, K+1)."""
        m = np.zeros((self.n_max, self.grid.K + 1))
        m[:, 1:] = (self._eigenvectors * np.sqrt(self._matrix_eigenvalues)).T
        return m

    def check_truncation(self, N):
        if int(N) != N or not (1 <= N <= self.n_max):
            raise InvalidArgument(f"truncation N must lie in [1, {self.n_max}], got {N}")
        return int(N)

    def coefficients(self, values, N=None):
        """KL coordinates <h_{i,j}, w> of grid values of shape (..., K+1, d)."""
        N = self.n_max if N is None else self.check_truncation(N)
        dual = self._eigenvectors[:, :N] / np.sqrt(self._matrix_eigenvalues[:N])
        return np.einsum("ki,...kj->...ij", dual, np.asarray(values)[..., 1:, :])

    def realize(self, coefficients):
        """Grid values of sum_{i,j} c_{i,j} h_{i,j}; coefficients (..., N, d)."""
        c = np.asarray(coefficients, dtype=float)
        N = self.check_truncation(c.shape[-2])
        modes = self._eigenvectors[:, :N] * np.sqrt(self._matrix_eigenvalues[:N])
        inner = np.einsum("ki,...ij->...kj", modes, c)
        out = np.zeros(c.shape[:-2] + (self.grid.K + 1, c.shape[-1]))
        out[..., 1:, :] = inner
        return out

    def coefficient_covariance(self):
        """E[Z Z^T] for the scalar KL coefficients, computed from the grid covariance.

        Equals the identity exactly in exact arithmetic.
        """
        sigma = covariance_matrix(self.grid, self.H)
        dual = self._eigenvectors / np.sqrt(self._matrix_eigenvalues)
        return dual.T @ sigma @ dual

    def element(self, coefficients):
        return CameronMartinElement(self, coefficients)


def build_kl_basis(grid, H, d=1):
    """Build the grid KL basis for d independent fBM components."""
    if int(d) != d or d < 1:
        raise InvalidArgument(f"dimension d must be a positive integer, got {d}")
    if not (0.0 < H < 1.0):
        raise InvalidArgument(f"Hurst parameter must lie in (0, 1), got {H}")
    lam, U = _grid_eigensystem(grid, float(H))
    ef = np.zeros((len(lam), grid.K + 1))
    ef[:, 1:] = U.T / math.sqrt(grid.dt)
    ev = lam * grid.dt
    for a in (ef, ev):
        a.setflags(write=False)
    return KLBasis(grid, float(H), int(d), ev, ef, lam, U)


@dataclass(frozen=True, eq=False)
class CameronMartinElement:
    """Finite KL expansion sum_{i<=N, j<=d} c_{i,j} h_{i,j}."""

    basis: KLBasis
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float)
        if c.ndim == 1 and self.basis.d == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[1] != self.basis.d:
            raise InvalidArgument(f"coefficients must have shape (N, {self.basis.d})")
        self.basis.check_truncation(c.shape[0])
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @property
    def N(self):
        return self.coefficients.shape[0]

    @property
    def realization(self):
        return GridPath(self.basis.grid, self.basis.realize(self.coefficients))

    @property
    def norm(self):
        return cm_norm(self)


def cm_norm(h):
    """Cameron-Martin norm; by orthonormality the Euclidean norm of the coefficients."""
    return float(np.linalg.norm(h.coefficients))


def project(w, basis, N):
    """Split ``w`` into its first-N KL part and the remainder.

    Returns ``(w_N, remainder)`` with ``w_N.realization + remainder == w`` on the grid.
    """
    N = basis.check_truncation(N)
    if w.grid != basis.grid:
        raise InvalidArgument("path and basis live on different grids")
    if w.d != basis.d:
        raise InvalidArgument("path and basis have different dimensions")
    c = basis.coefficients(w.values, N)
    head = basis.realize(c)
    return CameronMartinElement(basis, c), GridPath(w.grid, w.values - head)


def _chunks(n):
    return [(c, min(CHUNK_SIZE, n - c * CHUNK_SIZE)) for c in range(-(-n // CHUNK_SIZE))]


def _chunk_rng(seed, chunk):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))


def sample_coefficients(n, N, d, seed, workers=1):
    """Standard normal KL coordinates, shape (n, N, d), drawn chunk by chunk."""
    if n < 0:
        raise InvalidArgument("sample count must be non-negative")

    def draw(job):
        c, m = job
        return _chunk_rng(seed, c).standard_normal((m, N, d))

    jobs = _chunks(n)
    if not jobs:
        return np.zeros((0, N, d))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(draw, jobs))
    else:
        parts = [draw(j) for j in jobs]
    return np.concatenate(parts, axis=0)


def sample_array(grid, H, n, seed, d=1, workers=1):
    """fBM samples as an array of shape (n, K+1, d).

    Sampling uses the spectral factorization of the grid covariance, so the
    KL coordinates of each sample are exactly the standard normals drawn.
    """
    if n < 1:
        raise InvalidArgument(f"need at least one sample, got n={n}")
    basis = build_kl_basis(grid, H, d)
    z = sample_coefficients(n, basis.n_max, d, seed, workers)
    return basis.realize(z)


def sample_paths(grid, H, n, seed, d=1, workers=1):
    """Draw ``n`` independent d-dimensional fBM paths with i.i.d. components."""
    return [GridPath(grid, v) for v in sample_array(grid, H, n, seed, d, workers)]
