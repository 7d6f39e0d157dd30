"""Certificates that the density of y_t is positive at a target point.

A certificate is a Cameron-Martin control h (in KL coordinates) whose
Young solution reaches z at time t with a full-rank derivative.  It is
found by damped Gauss-Newton (Levenberg-Marquardt) on
J(h) = 1/2 |Psi(h)_t - z|^2 over a finite KL truncation.  Failing to find
one is reported as NotCertified; it never proves that the density vanishes.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, NotElliptic
from .gaussian_driver import GridPath, TimeGrid, build_kl_basis
from .malliavin import _gram, kl_derivative, skeleton_malliavin
from .solvers import _as_start, jacobian_flow_arrays, jacobian_segment, solve_young

CERTIFIED = "Certified"
NOT_CERTIFIED = "NotCertified"

DAMPING_MIN, DAMPING_MAX = 1e-8, 1e4
VERIFY_ATOL = 1e-8


def stable_hash(payload):
    """SHA-256 of the canonical JSON form (sorted keys, no whitespace)."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _vec(x):
    return [float(v) for v in np.atleast_1d(np.asarray(x, dtype=float))]


def problem_hash(z, t, vf, H, a):
    """Identifies the question 'is f_t(z) > 0' independently of numerical settings."""
    return stable_hash({"z": _vec(z), "t": float(t), "vector_fields": vf.spec,
                        "H": float(H), "a": _vec(a)})


@dataclass
class CertifyOptions:
    n_starts: int = 8
    start_radius: float = 1.0
    max_iter: int = 100
    eps_res: float | None = None
    delta_rank_rel: float = 1e-8
    seed: int = 0
    damping: float = 1e-3
    substeps: int = 8
    N_rank: int | None = None
    workers: int = 1


@dataclass
class PositivityCertificate:
    z: list
    t: float
    coefficients: list
    N: int
    N_rank: int
    residual: float
    lambda_min: float
    trace_C: float
    eps_res: float
    delta_rank: float
    verdict: str
    cm_norm: float
    optimizer: dict
    settings: dict
    config_hash: str
    problem_hash: str
    schema_version: int = 1

    @property
    def certified(self):
        return self.verdict == CERTIFIED

    def control(self, basis):
        return basis.element(np.array(self.coefficients))

    def to_json(self):
        return {"kind": "positivity-certificate", **asdict(self)}

    @classmethod
    def from_json(cls, data):
        data = {k: v for k, v in data.items() if k != "kind"}
        return cls(**data)


def _config_payload(basis, vf, a, settings):
    return {"grid": {"T": basis.grid.T, "K": basis.grid.K}, "H": basis.H, "d": basis.d,
            "vector_fields": vf.spec, "a": _vec(a), **settings}


def _verdict(residual, lambda_min, eps_res, delta_rank):
    return CERTIFIED if (residual < eps_res and lambda_min >= delta_rank) else NOT_CERTIFIED


def _rank_threshold(trace, e, rel):
    # the tiny floor keeps an identically zero matrix from passing the rank test
    return max(rel * trace / e, np.finfo(float).tiny)


def _start_points(opts, N, d):
    starts = [np.zeros((N, d))]
    for s in range(1, opts.n_starts):
        rng = np.random.default_rng(np.random.SeedSequence(opts.seed, spawn_key=(s,)))
        v = rng.standard_normal((N, d))
        radius = opts.start_radius * rng.uniform() ** (1.0 / v.size)
        starts.append(v * radius / np.linalg.norm(v))
    return np.stack(starts)


def _evaluate(c, basis, vf, a, z, k, substeps):
    """Residuals (S, e) and Jacobians (S, e, N d) for a stack of coefficient arrays."""
    values = basis.realize(c)
    Y, J, Ji, M, div = jacobian_flow_arrays(values, vf, a, basis.grid, substeps)
    N = c.shape[-2]
    G = kl_derivative(M, J[:, k], basis, N, k).reshape(c.shape[0], vf.e, -1)
    r = Y[:, k] - z
    return r, G, div


def _levenberg_marquardt(c0, basis, vf, a, z, k, opts, eps_res):
    """Vectorised LM over independent starts. Returns final coefficients and traces."""
    S, N, d = c0.shape
    e = vf.e
    c = c0.copy()
    lam = np.full(S, float(opts.damping))
    r, G, div = _evaluate(c, basis, vf, a, z, k, opts.substeps)
    if np.any(div):
        solve_young(GridPath(basis.grid, basis.realize(c[np.argmax(div)])), vf, a, opts.substeps)
    obj = 0.5 * np.sum(r ** 2, axis=1)
    active = np.ones(S, bool)
    traces = [[float(o)] for o in obj]
    iters = np.zeros(S, int)
    accepted = np.zeros(S, int)
    target = 1e-3 * eps_res
    for _ in range(opts.max_iter):
        active &= np.sqrt(2 * obj) >= target
        if not active.any():
            break
        idx = np.flatnonzero(active)
        Ga, ra = G[idx], r[idx]
        # minimum-norm damped step: delta = -G^T (G G^T + lam I)^{-1} r
        A = Ga @ np.swapaxes(Ga, 1, 2) + lam[idx, None, None] * np.eye(e)
        delta = -np.einsum("sap,sa->sp", Ga, np.linalg.solve(A, ra[..., None])[..., 0])
        lin = ra + np.einsum("sap,sp->sa", Ga, delta)
        predicted = obj[idx] - 0.5 * np.sum(lin ** 2, axis=1)
        trial = c[idx] + delta.reshape(-1, N, d)
        rt, Gt, divt = _evaluate(trial, basis, vf, a, z, k, opts.substeps)
        objt = np.where(divt, np.inf, 0.5 * np.sum(rt ** 2, axis=1))
        gain = (obj[idx] - objt) / np.where(predicted > 0, predicted, np.inf)
        ok = (objt < obj[idx]) & np.isfinite(objt)
        iters[idx] += 1
        for j, s in enumerate(idx):
            if ok[j]:
                c[s], r[s], G[s], obj[s] = trial[j], rt[j], Gt[j], objt[j]
                traces[s].append(float(objt[j]))
                accepted[s] += 1
                lam[s] = max(DAMPING_MIN, lam[s] * max(1 / 3, 1 - (2 * gain[j] - 1) ** 3))
            else:
                if lam[s] >= DAMPING_MAX:
                    active[s] = False
                lam[s] = min(DAMPING_MAX, lam[s] * 4)
    return c, obj, traces, iters, accepted, lam


def certify(z, t, vf, a, basis, N, opts=None):
    """Search for a control steering the Young solution to ``z`` at time ``t`` with rank-e derivative.

    Returns a ``PositivityCertificate``; the verdict is Certified iff the
    residual is below ``eps_res`` and lambda_min of the truncated Malliavin
    matrix at the control is at least ``delta_rank``.
    """
    opts = opts or CertifyOptions()
    z = np.asarray(z, dtype=float)
    a = _as_start(a, vf.e)
    if z.shape != (vf.e,):
        raise InvalidArgument(f"target must have {vf.e} components")
    if basis.d != vf.d:
        raise InvalidArgument("basis dimension differs from the number of driving fields")
    if not (0 < t <= basis.grid.T):
        raise InvalidArgument(f"time must lie in (0, T], got {t}")
    N = basis.check_truncation(N)
    if N * vf.d < vf.e:
        raise InvalidArgument(f"need N d >= e control directions, got N={N}")
    N_rank = basis.check_truncation(opts.N_rank or N)
    k = basis.grid.index_of(t)
    eps_res = opts.eps_res if opts.eps_res is not None else 1e-6 * (1 + np.linalg.norm(z))

    starts = _start_points(opts, N, vf.d)
    groups = np.array_split(np.arange(len(starts)), max(1, min(opts.workers, len(starts))))

    def run(ids):
        return _levenberg_marquardt(starts[ids], basis, vf, a, z, k, opts, eps_res)

    if len(groups) > 1:
        with ThreadPoolExecutor(len(groups)) as ex:
            parts = list(ex.map(run, groups))
    else:
        parts = [run(groups[0])]
    c = np.concatenate([p[0] for p in parts])
    traces = sum((p[2] for p in parts), [])
    iters = np.concatenate([p[3] for p in parts])
    accepted = np.concatenate([p[4] for p in parts])
    lam = np.concatenate([p[5] for p in parts])

    # residual and rank at every start's optimum (one batched solve), then pick the best
    n_eval = max(N, N_rank)
    padded = np.zeros((len(c), n_eval, vf.d))
    padded[:, :N] = c
    r_all, G_all, _ = _evaluate(padded, basis, vf, a, z, k, opts.substeps)
    results = []
    for s in range(len(c)):
        C = _gram(G_all[s].reshape(vf.e, n_eval, vf.d)[:, :max(N_rank, N)])
        lam_min = float(np.linalg.eigvalsh(0.5 * (C + C.T))[0])
        residual = float(np.linalg.norm(r_all[s]))
        delta_rank = _rank_threshold(float(np.trace(C)), vf.e, opts.delta_rank_rel)
        results.append((residual, lam_min, float(np.trace(C)),
                        _verdict(residual, lam_min, eps_res, delta_rank), delta_rank))
    order = sorted(range(len(c)), key=lambda s: (results[s][3] != CERTIFIED, results[s][0], s))
    best = order[0]
    residual, lambda_min, trace, verdict, delta_rank = results[best]
    settings = {"t": float(t), "z": _vec(z), "N": N, "N_rank": N_rank, "eps_res": float(eps_res),
                "delta_rank_rel": float(opts.delta_rank_rel), "seed": int(opts.seed),
                "n_starts": int(opts.n_starts), "start_radius": float(opts.start_radius),
                "max_iter": int(opts.max_iter), "substeps": int(opts.substeps)}
    return PositivityCertificate(
        z=_vec(z), t=float(t), coefficients=c[best].tolist(), N=N, N_rank=N_rank,
        residual=residual, lambda_min=lambda_min, trace_C=trace, eps_res=float(eps_res),
        delta_rank=delta_rank, verdict=verdict, cm_norm=float(np.linalg.norm(c[best])),
        optimizer={"start": int(best), "iterations": int(iters[best]),
                   "accepted_steps": int(accepted[best]), "final_damping": float(lam[best]),
                   "objective": traces[best],
                   "start_residuals": [float(r[0]) for r in results]},
        settings=settings,
        config_hash=stable_hash(_config_payload(basis, vf, a, settings)),
        problem_hash=problem_hash(z, t, vf, basis.H, a))


def _assess(coeffs, z, t, vf, a, basis, N_rank, substeps, eps_res, rel):
    """(residual, lambda_min, trace, verdict, delta_rank) for one control, solved from scratch."""
    h = basis.element(coeffs)
    y = solve_young(h.realization, vf, a, substeps).at(t)
    residual = float(np.linalg.norm(y - z))
    c = np.zeros((N_rank, basis.d))
    m = min(h.N, N_rank)
    c[:m] = h.coefficients[:m]
    if h.N > N_rank:
        # rank is judged on at least the modes the control uses
        c = h.coefficients
        N_rank = h.N
    C = skeleton_malliavin(basis.element(c), basis, N_rank, vf, a, t, substeps)
    delta_rank = _rank_threshold(C.trace, vf.e, rel)
    return residual, C.lambda_min, C.trace, _verdict(residual, C.lambda_min, eps_res, delta_rank), delta_rank


def verify(cert, vf, a, basis):
    """Re-solve the certificate's control from scratch and check it.

    True iff the recomputed residual and lambda_min meet the stored
    thresholds and agree with the stored values to 1e-8.
    """
    expected = stable_hash(_config_payload(basis, vf, a, cert.settings))
    if expected != cert.config_hash:
        raise InvalidArgument("certificate was issued for a different configuration")
    residual, lambda_min, trace, verdict, delta_rank = _assess(
        np.array(cert.coefficients), np.array(cert.z), cert.t, vf, a, basis, cert.N_rank,
        cert.settings["substeps"], cert.eps_res, cert.settings["delta_rank_rel"])
    tol_lam = VERIFY_ATOL * max(1.0, abs(lambda_min))
    return bool(
        residual < cert.eps_res
        and lambda_min >= cert.delta_rank
        and cert.verdict == CERTIFIED
        and abs(residual - cert.residual) <= VERIFY_ATOL
        and abs(lambda_min - cert.lambda_min) <= tol_lam
        and abs(delta_rank - cert.delta_rank) <= VERIFY_ATOL * max(1.0, delta_rank))


def replay_on_grid(cert, vf, a, basis, fine_grid, substeps=None):
    """Residual of the certificate's control re-solved on a refinement of its grid.

    The control is the same piecewise-linear path, sampled at the finer
    grid points.  Returns ``(residual, within)`` where ``within`` tells
    whether the residual is below 10 eps_res.
    """
    g = basis.grid
    if fine_grid.T != g.T or fine_grid.K % g.K:
        raise InvalidArgument("replay grid must refine the certificate grid")
    coarse = basis.realize(np.array(cert.coefficients))
    fine = np.stack([np.interp(fine_grid.points, g.points, coarse[:, j]) for j in range(basis.d)], -1)
    sol = solve_young(GridPath(fine_grid, fine), vf, a, substeps or cert.settings["substeps"])
    residual = float(np.linalg.norm(sol.at(cert.t) - np.array(cert.z)))
    return residual, residual < 10 * cert.eps_res


def elliptic_reach(z, t, vf, a, grid, substeps=8, tol=1e-8):
    """Steer the Young solution along the straight line from a to z, reaching z at time t.

    On each grid interval the constant control rate is found by minimum-norm
    Newton iteration so that the interval ends on the line; the control is
    held constant after t.  Requires sigma to have full row rank along the
    way (checked at every interval start).
    """
    z = np.asarray(z, dtype=float)
    y = _as_start(a, vf.e)
    kt = grid.index_of(t)
    if kt == 0:
        raise InvalidArgument("time must be positive")
    dh = np.zeros((grid.K, vf.d))
    eye = np.eye(vf.e)
    for k in range(kt):
        sig = vf.sigma(y)
        s = np.linalg.svd(sig, compute_uv=False)
        if len(s) < vf.e or s[0] == 0 or s[vf.e - 1] <= tol * s[0]:
            raise NotElliptic(f"sigma has rank < {vf.e} at t = {k * grid.dt:.6g}")
        goal = y + (z - y) / (kt - k)
        v = np.linalg.pinv(sig) @ (goal - y - vf.b(y) * grid.dt)
        for _ in range(50):
            (y_end, J, _), M = jacobian_segment(vf, (y, eye, eye), v / grid.dt, grid.dt, substeps)
            miss = y_end - goal
            if np.linalg.norm(miss) < 1e-14 * (1 + np.linalg.norm(goal)):
                break
            v = v - np.linalg.pinv(J @ M / grid.dt) @ miss
        (y, _, _), _ = jacobian_segment(vf, (y, eye, eye), v / grid.dt, grid.dt, substeps)
        dh[k] = v
    values = np.vstack([np.zeros((1, vf.d)), np.cumsum(dh, axis=0)])
    return GridPath(grid, values)
