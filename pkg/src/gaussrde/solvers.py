"""Solution maps for controlled equations dy = sigma(y) dx + b(y) dt.

* Young (piecewise-linear) drivers: classical RK4 on each grid interval,
  where the driver velocity is constant.
* Rough drivers: the step-L Euler scheme built from the level-L increments.
* First and second variations along a direction l, and the Jacobian flow
  used to get all first variations at once through Duhamel's formula.

Every integrator accepts leading batch axes: driver values of shape
(..., K+1, d) and start points of shape (..., e).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InvalidArgument, NumericalDegeneracy
from .gaussian_driver import GridPath, TimeGrid
from .rough_path import GeometricRoughPath, segment_signature

#: States beyond this magnitude count as divergence.
DIVERGENCE_BOUND = 1e6

#: Largest admissible condition number of the Jacobian flow.
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class SolutionPath:
    grid: TimeGrid
    states: np.ndarray
    start: np.ndarray
    method: str
    steps: int

    @property
    def final(self):
        return self.states[-1]

    def at(self, t):
        return self.states[self.grid.index_of(t)]


@dataclass(frozen=True, eq=False)
class VariationBundle:
    grid: TimeGrid
    y: SolutionPath
    xi1: np.ndarray
    xi2: np.ndarray
    direction: GridPath


@dataclass(frozen=True, eq=False)
class JacobianFlow:
    """Flow derivative J_t of the Young solution in its starting point.

    ``segment_integrals[k]`` is the integral of J_s^{-1} sigma(y_s) over the
    k-th grid interval, which turns Duhamel's formula for the first
    variation into a finite sum over intervals.
    """

    grid: TimeGrid
    y: np.ndarray
    J: np.ndarray
    J_inv: np.ndarray
    segment_integrals: np.ndarray

    def duhamel(self, l):
        """First variation xi^1(h, l) at every grid point from the stored flow."""
        rates = np.asarray(l.values if isinstance(l, GridPath) else l, dtype=float)
        rates = np.diff(rates, axis=-2) / self.grid.dt
        return _duhamel(self.J, self.segment_integrals, rates)

    def derivative_matrix(self, directions, k=None):
        """Columns xi^1(h, l)_{t_k} for a stack of directions of shape (n, K+1, d)."""
        k = self.grid.K if k is None else k
        rates = np.diff(np.asarray(directions, dtype=float), axis=-2) / self.grid.dt
        acc = np.einsum("mad,nmd->an", self.segment_integrals[:k], rates[:, :k])
        return self.J[k] @ acc


def _duhamel(J, M, rates):
    # xi_k = J_k sum_{m<k} M_m rate_m
    incr = np.einsum("...mad,...md->...ma", M, rates)
    acc = np.concatenate([np.zeros_like(incr[..., :1, :]), np.cumsum(incr, axis=-2)], axis=-2)
    return np.einsum("...kab,...kb->...ka", J, acc)


def _as_start(a, e, batch=()):
    a = np.asarray(a, dtype=float)
    if a.shape[-1:] != (e,):
        raise InvalidArgument(f"start point must have {e} components, got shape {a.shape}")
    return np.broadcast_to(a, batch + (e,)).copy()


def _check_driver(vf, d):
    if d != vf.d:
        raise InvalidArgument(f"driver has dimension {d}, vector fields expect {vf.d}")


def _rk4(rate, state, dt):
    k1 = rate(state)
    k2 = rate(tuple(s + 0.5 * dt * k for s, k in zip(state, k1)))
    k3 = rate(tuple(s + 0.5 * dt * k for s, k in zip(state, k2)))
    k4 = rate(tuple(s + dt * k for s, k in zip(state, k3)))
    return tuple(s + dt / 6.0 * (a + 2 * b + 2 * c + d)
                 for s, a, b, c, d in zip(state, k1, k2, k3, k4))


def _linearization(dsig, db, hdot):
    return np.einsum("...aik,...i->...ak", dsig, hdot) + db


def _bad(y):
    return ~np.all(np.isfinite(y), axis=-1) | (np.max(np.abs(y), axis=-1) > DIVERGENCE_BOUND)


class _Guard:
    """Tracks the first grid index at which each batch member diverged."""

    def __init__(self, batch):
        self.first = np.full(batch, -1)

    def update(self, y, k):
        bad = _bad(y) & (self.first < 0)
        self.first[bad] = k
        return y

    @property
    def diverged(self):
        return self.first >= 0

    def raise_if_any(self, grid):
        if np.any(self.diverged):
            k = int(np.min(self.first[self.diverged]))
            t = k * grid.dt
            raise DivergenceError(f"solution diverged at t = {t:.6g}", time=t)


def young_flow(values, vf, a, grid, substeps=8):
    """Batched Young solution at grid points.

    Returns ``(states, diverged)`` with states of shape (..., K+1, e).
    """
    values = np.asarray(values, dtype=float)
    _check_driver(vf, values.shape[-1])
    rates = np.diff(values, axis=-2) / grid.dt
    batch = values.shape[:-2]
    y = _as_start(a, vf.e, batch)
    out = np.empty(batch + (grid.K + 1, vf.e))
    out[..., 0, :] = y
    guard = _Guard(batch)
    step = grid.dt / substeps
    with np.errstate(all="ignore"):
        for k in range(grid.K):
            hdot = rates[..., k, :]

            def rate(s):
                sig, b = vf.evaluate(s[0], 0)
                return (np.einsum("...ai,...i->...a", sig, hdot) + b,)

            state = (y,)
            for _ in range(substeps):
                state = _rk4(rate, state, step)
            y = guard.update(state[0], k + 1)
            out[..., k + 1, :] = y
    return out, guard.diverged


def solve_young(h, vf, a, substeps=8):
    """Solve the Young ODE dy = sigma(y) dh + b(y) dt, y_0 = a, for piecewise-linear h."""
    if substeps < 1:
        raise InvalidArgument("substeps must be positive")
    states, diverged = young_flow(h.values, vf, a, h.grid, substeps)
    if diverged:
        g = _Guard(())
        g.first = np.array(np.argmax(_bad(states)))
        g.raise_if_any(h.grid)
    return SolutionPath(h.grid, states, np.asarray(a, dtype=float), "young", h.grid.K * substeps)


def jacobian_segment(vf, state, hdot, dt, substeps):
    """Advance (y, J, J^{-1}) over one interval of length ``dt`` with constant driver rate.

    Returns the advanced triple and the integral of J^{-1} sigma(y) over the interval.
    """
    def rate(s):
        sig, b, dsig, db = vf.evaluate(s[0], 1)
        A = _linearization(dsig, db, hdot)
        return (np.einsum("...ai,...i->...a", sig, hdot) + b, A @ s[1], -s[2] @ A, s[2] @ sig)

    y, J, Ji = state
    s = (y, J, Ji, np.zeros(y.shape[:-1] + (vf.e, vf.d)))
    step = dt / substeps
    for _ in range(substeps):
        s = _rk4(rate, s, step)
    return s[:3], s[3]


def jacobian_flow_arrays(values, vf, a, grid, substeps=8):
    """Batched (y, J, J^{-1}, segment integrals, diverged) along Young solutions."""
    values = np.asarray(values, dtype=float)
    _check_driver(vf, values.shape[-1])
    e, d = vf.e, vf.d
    rates = np.diff(values, axis=-2) / grid.dt
    batch = values.shape[:-2]
    y = _as_start(a, e, batch)
    eye = np.broadcast_to(np.eye(e), batch + (e, e))
    Y = np.empty(batch + (grid.K + 1, e))
    J = np.empty(batch + (grid.K + 1, e, e))
    Ji = np.empty_like(J)
    M = np.empty(batch + (grid.K, e, d))
    Y[..., 0, :], J[..., 0, :, :], Ji[..., 0, :, :] = y, eye, eye
    guard = _Guard(batch)
    state = (y, eye.copy(), eye.copy())
    with np.errstate(all="ignore"):
        for k in range(grid.K):
            state, M[..., k, :, :] = jacobian_segment(vf, state, rates[..., k, :], grid.dt, substeps)
            Y[..., k + 1, :] = guard.update(state[0], k + 1)
            J[..., k + 1, :, :], Ji[..., k + 1, :, :] = state[1:]
    return Y, J, Ji, M, guard.diverged


def jacobian_flow(h, vf, a, substeps=8):
    """Jacobian flow of the Young solution driven by ``h``."""
    Y, J, Ji, M, diverged = jacobian_flow_arrays(h.values, vf, a, h.grid, substeps)
    if diverged:
        solve_young(h, vf, a, substeps)  # re-raise with the time of divergence
    cond = np.linalg.cond(J)
    if np.max(cond) > MAX_CONDITION:
        raise NumericalDegeneracy(f"Jacobian flow is singular (condition number {np.max(cond):.3e})")
    return JacobianFlow(h.grid, Y, J, Ji, M)


def variation_arrays(values, directions, vf, a, grid, substeps=8):
    """Batched RK4 solution of the coupled system (y, xi^1, xi^2)."""
    values = np.asarray(values, dtype=float)
    directions = np.asarray(directions, dtype=float)
    _check_driver(vf, values.shape[-1])
    e = vf.e
    hr = np.diff(values, axis=-2) / grid.dt
    lr = np.diff(directions, axis=-2) / grid.dt
    batch = np.broadcast_shapes(values.shape[:-2], directions.shape[:-2])
    y = _as_start(a, e, batch)
    z = np.zeros(batch + (e,))
    out = [np.empty(batch + (grid.K + 1, e)) for _ in range(3)]
    for o, s in zip(out, (y, z, z)):
        o[..., 0, :] = s
    guard = _Guard(batch)
    step = grid.dt / substeps
    state = (y, z.copy(), z.copy())
    with np.errstate(all="ignore"):
        for k in range(grid.K):
            hdot, ldot = hr[..., k, :], lr[..., k, :]

            def rate(s):
                y, x1, x2 = s
                sig, b, dsig, db, d2sig, d2b = vf.evaluate(y, 2)
                A = _linearization(dsig, db, hdot)
                dy = np.einsum("...ai,...i->...a", sig, hdot) + b
                d1 = np.einsum("...ab,...b->...a", A, x1) + np.einsum("...ai,...i->...a", sig, ldot)
                d2 = (np.einsum("...ab,...b->...a", A, x2)
                      + np.einsum("...aikl,...k,...l,...i->...a", d2sig, x1, x1, hdot)
                      + 2 * np.einsum("...aik,...k,...i->...a", dsig, x1, ldot)
                      + np.einsum("...akl,...k,...l->...a", d2b, x1, x1))
                return dy, d1, d2

            for _ in range(substeps):
                state = _rk4(rate, state, step)
            guard.update(state[0], k + 1)
            for o, s in zip(out, state):
                o[..., k + 1, :] = s
    return out[0], out[1], out[2], guard.diverged


#: A finite-difference error within this factor of the rounding floor counts as exact.
FD_NOISE_FACTOR = 10.0


def derivative_check(values, directions, vf, a, grid, eps=1e-3, substeps=8):
    """Central-difference ratio test of xi^1 and xi^2 for a batch of (h, l) pairs.

    For each pair the sup-in-time errors of the central first and second
    differences at ``eps`` and ``eps / 2`` are compared with the solved
    variations; both are O(eps^2), so the ratios should be close to 4.
    When the map is polynomial of degree <= 2 in h (additive, heisenberg)
    the differences are exact up to rounding and the ratio is meaningless;
    such pairs are flagged ``exact``, meaning their error at ``eps`` is
    within ``FD_NOISE_FACTOR`` of the rounding floor u (1 + |y|) / eps^k.
    Second differences lose accuracy like 1/eps^2, so directions should be
    large enough for the truncation error to stand out.  Also reports the sup difference
    between the Duhamel and directly integrated first variations.
    """
    values = np.asarray(values, dtype=float)
    directions = np.asarray(directions, dtype=float)
    y, xi1, xi2, div = variation_arrays(values, directions, vf, a, grid, substeps)
    Y, J, Ji, M, div_j = jacobian_flow_arrays(values, vf, a, grid, substeps)
    if np.any(div) or np.any(div_j):
        raise DivergenceError("solution diverged during the derivative check")
    duh = _duhamel(J, M, np.diff(directions, axis=-2) / grid.dt)
    sup = lambda x: np.max(np.abs(x), axis=(-2, -1))
    err1, err2 = [], []
    for step in (eps, eps / 2):
        plus, _ = young_flow(values + step * directions, vf, a, grid, substeps)
        minus, _ = young_flow(values - step * directions, vf, a, grid, substeps)
        err1.append(sup((plus - minus) / (2 * step) - xi1))
        err2.append(sup((plus - 2 * y + minus) / step ** 2 - xi2))
    unit = np.finfo(float).eps * (1 + sup(y))
    out = {"duhamel_diff": sup(duh - xi1)}
    for name, (e_big, e_small), k in (("xi1", err1, 1), ("xi2", err2, 2)):
        exact = e_big <= FD_NOISE_FACTOR * 16 * unit / eps ** k
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(exact, np.nan, e_big / e_small)
        out[name] = {"err_eps": e_big, "err_half": e_small, "ratio": ratio, "exact": exact}
    return out


def _rde_step(vf, y, incs, dt):
    level = len(incs)
    x1, x2 = incs[0], incs[1]
    sig, b, dsig, db, *rest = vf.evaluate(y, 2 if level == 3 else 1)
    dy = np.einsum("...ai,...i->...a", sig, x1)
    dy += np.einsum("...ajk,...ki,...ij->...a", dsig, sig, x2)
    if level == 3:
        d2sig = rest[0]
        x3 = incs[2]
        dy += np.einsum("...aklm,...li,...mj,...ijk->...a", d2sig, sig, sig, x3)
        dy += np.einsum("...akl,...ljm,...mi,...ijk->...a", dsig, dsig, sig, x3)
    # drift and its first mixed corrections
    sx = np.einsum("...ai,...i->...a", sig, x1)
    dy += b * dt
    dy += 0.5 * dt * (np.einsum("...ak,...k->...a", db, sx)
                      + np.einsum("...aik,...k,...i->...a", dsig, b, x1))
    dy += 0.5 * dt * dt * np.einsum("...ak,...k->...a", db, b)
    return y + dy


def rde_flow(incs, vf, a, grid):
    """Batched step-L Euler scheme; ``incs`` is an increment tuple with an interval axis."""
    _check_driver(vf, incs[0].shape[-1])
    batch = incs[0].shape[:-2]
    y = _as_start(a, vf.e, batch)
    out = np.empty(batch + (grid.K + 1, vf.e))
    out[..., 0, :] = y
    guard = _Guard(batch)
    steps = [np.moveaxis(x, -(i + 2), 0) for i, x in enumerate(incs)]
    with np.errstate(all="ignore"):
        for k in range(grid.K):
            y = guard.update(_rde_step(vf, y, tuple(s[k] for s in steps), grid.dt), k + 1)
            out[..., k + 1, :] = y
    return out, guard.diverged


def solve_rde(x, vf, a):
    """Solve dy = sigma(y) dx + b(y) dt for the rough path ``x`` with the step-L Euler scheme."""
    states, diverged = rde_flow(x.increments, vf, a, x.grid)
    if diverged:
        g = _Guard(())
        g.first = np.array(np.argmax(_bad(states)))
        g.raise_if_any(x.grid)
    return SolutionPath(x.grid, states, np.asarray(a, dtype=float), "rough-euler", x.grid.K)


# --- variations along rough drivers ------------------------------------------

def _augmented_fields(vf):
    """Fields of the coupled system Z = (y, xi1, xi2) driven by (x, l, t).

    Returns F(Z) of shape (..., 3e, 2d+1): columns for x^1..x^d, l^1..l^d, t.
    """
    e, d = vf.e, vf.d

    def F(Z):
        y, x1, x2 = Z[..., :e], Z[..., e:2 * e], Z[..., 2 * e:]
        sig, b, dsig, db, d2sig, d2b = vf.evaluate(y, 2)
        dx1 = np.einsum("...aik,...k->...ai", dsig, x1)
        wx = np.concatenate([
            sig,
            dx1,
            np.einsum("...aik,...k->...ai", dsig, x2) + np.einsum("...aikl,...k,...l->...ai", d2sig, x1, x1),
        ], axis=-2)
        wl = np.concatenate([np.zeros_like(sig), sig, 2 * dx1], axis=-2)
        w0 = np.concatenate([
            b,
            np.einsum("...ak,...k->...a", db, x1),
            np.einsum("...ak,...k->...a", db, x2) + np.einsum("...akl,...k,...l->...a", d2b, x1, x1),
        ], axis=-1)
        return np.concatenate([wx, wl, w0[..., None]], axis=-1)
    return F


def _directional(G, Z, V, h):
    """Central difference of G along V at Z with a step of length about h in Z-space."""
    n = np.linalg.norm(V, axis=-1, keepdims=True)
    scale = np.where(n > 0, h / np.where(n > 0, n, 1.0), 0.0)
    dz = V * scale
    diff = (G(Z + dz) - G(Z - dz)) / 2.0
    inv = np.where(n > 0, 1.0 / np.where(n > 0, scale, 1.0), 0.0)
    return diff * inv.reshape(inv.shape + (1,) * (diff.ndim - inv.ndim))


def _joint_increments(incs, dl, dt):
    """Level-L increments of (x, l, t) with l and t straight within each interval."""
    level = len(incs)
    dtv = np.full(incs[0].shape[:-1] + (1,), dt)
    z1 = np.concatenate([incs[0], dl, dtv], axis=-1)
    sig = segment_signature(z1, level)
    d = incs[0].shape[-1]
    z2 = sig[1].copy()
    z2[..., :d, :d] = incs[1]
    out = [z1, z2]
    if level == 3:
        z3 = sig[2].copy()
        z3[..., :d, :d, :d] = incs[2]
        out.append(z3)
    return out


def rough_variation_arrays(incs, directions, vf, a, grid, fd_step=1e-6):
    """Step-L Euler scheme for (y, xi^1, xi^2) along a rough driver and a Young direction.

    Compositions of the coupled fields are obtained by central finite
    differences of the exactly evaluated fields.
    """
    e = vf.e
    F = _augmented_fields(vf)
    level = len(incs)
    dl = np.diff(np.asarray(directions, dtype=float), axis=-2)
    batch = np.broadcast_shapes(incs[0].shape[:-2], dl.shape[:-2])
    Z = np.zeros(batch + (3 * e,))
    Z[..., :e] = _as_start(a, e, batch)
    out = np.empty(batch + (grid.K + 1, 3 * e))
    out[..., 0, :] = Z
    guard = _Guard(batch)
    steps = [np.moveaxis(x, -(i + 2), 0) for i, x in enumerate(_joint_increments(
        tuple(np.broadcast_to(x, batch + x.shape[len(x.shape) - (i + 2):]) for i, x in enumerate(incs)),
        np.broadcast_to(dl, batch + dl.shape[-2:]), grid.dt))]
    m = 2 * vf.d + 1

    def compose(Zc):
        # C[..., :, b, a] = (D F_b) F_a
        Fz = F(Zc)
        cols = [_directional(F, Zc, Fz[..., :, i], fd_step * (1 + np.linalg.norm(Zc, axis=-1, keepdims=True)))
                for i in range(m)]
        return np.stack(cols, axis=-1)

    with np.errstate(all="ignore"):
        for k in range(grid.K):
            z = [s[k] for s in steps]
            Fz = F(Z)
            dZ = np.einsum("...ai,...i->...a", Fz, z[0])
            C = compose(Z)
            dZ += np.einsum("...aji,...ij->...a", C, z[1])
            if level == 3:
                for i in range(m):
                    D = _directional(compose, Z, Fz[..., :, i],
                                     1e-4 * (1 + np.linalg.norm(Z, axis=-1, keepdims=True)))
                    # D[..., :, c, b] = D(DF_c F_b) F_i
                    dZ += np.einsum("...acb,...bc->...a", D, z[2][..., i, :, :])
            Z = Z + dZ
            guard.update(Z[..., :e], k + 1)
            out[..., k + 1, :] = Z
    return out[..., :e], out[..., e:2 * e], out[..., 2 * e:], guard.diverged


def solve_variation(driver, l, vf, a, substeps=8):
    """Solve for (y, xi^1, xi^2) along ``driver`` in the direction ``l``.

    ``driver`` is a ``GridPath`` (Young case, RK4) or a ``GeometricRoughPath``
    (step-L Euler scheme).  xi^1 and xi^2 are the first and second
    directional derivatives D_l y and D^2_{l,l} y.
    """
    if l.grid != driver.grid or l.d != vf.d:
        raise InvalidArgument("direction must share the driver's grid and dimension")
    if isinstance(driver, GeometricRoughPath):
        y, x1, x2, div = rough_variation_arrays(driver.increments, l.values, vf, a, driver.grid)
        method, steps = "rough-euler", driver.grid.K
    else:
        y, x1, x2, div = variation_arrays(driver.values, l.values, vf, a, driver.grid, substeps)
        method, steps = "young", driver.grid.K * substeps
    if div:
        g = _Guard(())
        g.first = np.array(np.argmax(_bad(y)))
        g.raise_if_any(driver.grid)
    sol = SolutionPath(driver.grid, y, np.asarray(a, dtype=float), method, steps)
    return VariationBundle(driver.grid, sol, x1, x2, l)


def write_solution_csv(sol, path, variation=None):
    """CSV with columns t, y_0.., and xi1_*, xi2_* when a variation bundle is given."""
    e = sol.states.shape[1]
    header = ["t"] + [f"y_{i}" for i in range(e)]
    cols = [sol.grid.points[:, None], sol.states]
    if variation is not None:
        header += [f"xi1_{i}" for i in range(e)] + [f"xi2_{i}" for i in range(e)]
        cols += [variation.xi1, variation.xi2]
    table = np.hstack(cols)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
