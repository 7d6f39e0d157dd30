"""Malliavin covariance matrices of Young solutions in KL coordinates.

For a control h, the derivative of y_t in the basis direction h_{i,j} is
the first variation xi^1(h, h_{i,j})_t.  Stacking these columns gives the
e x (N d) derivative matrix D and the truncated Malliavin matrix C = D D^T.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .gaussian_driver import (CHUNK_SIZE, CameronMartinElement, _chunks, build_kl_basis,
                              sample_coefficients)
from .solvers import jacobian_flow_arrays

DEFAULT_TAUS = (1e-10, 1e-8, 1e-6, 1e-4)
DEFAULT_QUANTILES = (0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0)


@dataclass(frozen=True, eq=False)
class MalliavinMatrix:
    C: np.ndarray
    N: int
    eigenvalues: np.ndarray
    t: float
    derivative: np.ndarray | None = None

    @property
    def lambda_min(self):
        return float(self.eigenvalues[0])

    @property
    def trace(self):
        return float(np.trace(self.C))


def kl_derivative(segment_integrals, J_k, basis, N, k):
    """Derivative of y_{t_k} along h_{i,j}, i < N: shape (..., e, N, d).

    ``segment_integrals`` (..., K, e, d) and ``J_k`` (..., e, e) come from a
    Jacobian flow on the same grid as ``basis``.
    """
    rates = np.diff(basis.modes[:N], axis=-1)[:, :k] / basis.grid.dt
    acc = np.einsum("...maj,im->...aij", segment_integrals[..., :k, :, :], rates)
    return np.einsum("...ab,...bij->...aij", J_k, acc)


def _gram(D):
    flat = D.reshape(D.shape[:-2] + (-1,))
    return np.einsum("...ai,...bi->...ab", flat, flat)


def skeleton_malliavin(h, basis, N, vf, a, t, substeps=8):
    """Truncated Malliavin matrix of the Young solution at time ``t`` along control ``h``."""
    N = basis.check_truncation(N)
    if not isinstance(h, CameronMartinElement):
        raise InvalidArgument("control must be a CameronMartinElement")
    if h.basis.grid != basis.grid:
        raise InvalidArgument("control and basis live on different grids")
    k = basis.grid.index_of(t)
    Y, J, Ji, M, div = jacobian_flow_arrays(h.realization.values, vf, a, basis.grid, substeps)
    if div:
        from .solvers import solve_young
        solve_young(h.realization, vf, a, substeps)
    D = kl_derivative(M, J[k], basis, N, k)
    C = _gram(D)
    C = 0.5 * (C + C.T)
    return MalliavinMatrix(C, N, np.linalg.eigvalsh(C), float(t), D)


@dataclass(frozen=True, eq=False)
class SpectrumStats:
    """Distribution of lambda_min(C(w)) over sampled drivers (diagnostic only)."""

    lambda_min: np.ndarray
    quantiles: dict
    tail: dict
    n_diverged: int
    config: dict

    def to_json(self):
        return {
            "kind": "malliavin-spectrum",
            "schema_version": 1,
            "diagnostic": "finite truncation and grid; not a proof of non-degeneracy",
            "config": self.config,
            "n_diverged": self.n_diverged,
            "quantiles": {repr(q): v for q, v in self.quantiles.items()},
            "tail": {repr(tau): v for tau, v in self.tail.items()},
        }


def sampled_malliavin_spectrum(H, vf, a, t, N, n_samples, seed, grid, substeps=4,
                               taus=DEFAULT_TAUS, quantiles=DEFAULT_QUANTILES, workers=1):
    """Sample drivers w, project to N KL modes and record lambda_min of C(w^[N]).

    Returns quantiles of lambda_min and the empirical tail P(lambda_min < tau).
    """
    if n_samples < 1:
        raise InvalidArgument("need at least one sample")
    basis = build_kl_basis(grid, H, vf.d)
    N = basis.check_truncation(N)
    k = grid.index_of(t)
    z = sample_coefficients(n_samples, basis.n_max, vf.d, seed, workers)

    def run(job):
        c, m = job
        w = basis.realize(z[c * CHUNK_SIZE:c * CHUNK_SIZE + m])
        wN = basis.realize(basis.coefficients(w, N))
        Y, J, Ji, M, div = jacobian_flow_arrays(wN, vf, a, grid, substeps)
        D = kl_derivative(M, J[:, k], basis, N, k)
        lam = np.linalg.eigvalsh(_gram(D))[:, 0]
        return np.where(div, np.nan, lam)

    jobs = _chunks(n_samples)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    lam = np.concatenate(parts)
    ok = lam[np.isfinite(lam)]
    qs = {q: float(np.quantile(ok, q)) if ok.size else float("nan") for q in quantiles}
    tail = {tau: float(np.mean(ok < tau)) if ok.size else float("nan") for tau in taus}
    config = {"H": float(H), "vector_fields": vf.spec, "a": np.asarray(a, float).tolist(),
              "t": float(t), "N": N, "n_samples": int(n_samples), "seed": int(seed),
              "T": grid.T, "K": grid.K, "substeps": int(substeps)}
    return SpectrumStats(lam, qs, tail, int(np.sum(~np.isfinite(lam))), config)
