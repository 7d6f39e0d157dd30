"""Vector field systems V_0, ..., V_d on R^e with exact first and second derivatives.

Evaluators broadcast over leading batch axes of ``y``.  Index conventions:

* ``sigma(y)[..., a, i]``          component a of V_{i+1}
* ``dsigma(y)[..., a, i, k]``      d/dy_k of that component
* ``d2sigma(y)[..., a, i, k, l]``  second derivative
* ``b``, ``db``, ``d2b`` likewise for the drift V_0 without the driver index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgument

#: Central finite-difference step for Jacobians of nested brackets.
FD_STEP = 1e-5


@dataclass(frozen=True, eq=False)
class VectorFieldSystem:
    """Diffusion fields sigma = [V_1..V_d] and drift b = V_0 with their derivatives.

    ``evaluate(y, order)`` returns ``(sigma, b)`` for order 0, extended by
    ``(dsigma, db)`` for order 1 and ``(d2sigma, d2b)`` for order 2.
    """

    e: int
    d: int
    evaluate: Callable = field(repr=False)
    name: str = "custom"
    params: dict = field(default_factory=dict)
    smoothness: float = math.inf

    def sigma(self, y):
        return self.evaluate(np.asarray(y, dtype=float), 0)[0]

    def b(self, y):
        return self.evaluate(np.asarray(y, dtype=float), 0)[1]

    def dsigma(self, y):
        return self.evaluate(np.asarray(y, dtype=float), 1)[2]

    def db(self, y):
        return self.evaluate(np.asarray(y, dtype=float), 1)[3]

    def d2sigma(self, y):
        return self.evaluate(np.asarray(y, dtype=float), 2)[4]

    def d2b(self, y):
        return self.evaluate(np.asarray(y, dtype=float), 2)[5]

    @property
    def spec(self):
        """JSON-able identification used in configuration hashes."""
        return {"name": self.name, "params": self.params}

    def field(self, i):
        """V_i as a ``Field`` (i = 0 is the drift)."""
        if not (0 <= i <= self.d):
            raise InvalidArgument(f"field index must lie in [0, {self.d}], got {i}")
        if i == 0:
            return Field(self.b, self.db, self.d2b)
        j = i - 1
        return Field(lambda y: self.sigma(y)[..., j],
                     lambda y: self.dsigma(y)[..., j, :],
                     lambda y: self.d2sigma(y)[..., j, :, :])

    def fields(self):
        return [self.field(i) for i in range(self.d + 1)]


@dataclass(frozen=True)
class Field:
    """A single vector field with its Jacobian and (optionally) Hessian."""

    value: Callable
    jacobian: Callable
    hessian: Callable | None = None

    def __call__(self, y):
        return self.value(y)


def lie_bracket(V, W, y):
    """[V, W](y) = DW(y) V(y) - DV(y) W(y)."""
    y = np.asarray(y, dtype=float)
    return (np.einsum("...ab,...b->...a", W.jacobian(y), V.value(y))
            - np.einsum("...ab,...b->...a", V.jacobian(y), W.value(y)))


def _fd_jacobian(f, y, step=FD_STEP):
    y = np.asarray(y, dtype=float)
    cols = []
    for k in range(y.shape[-1]):
        dy = np.zeros_like(y)
        dy[..., k] = step
        cols.append((f(y + dy) - f(y - dy)) / (2 * step))
    return np.stack(cols, axis=-1)


def bracket_field(V, W):
    """The field [V, W].

    Its Jacobian is exact when both arguments carry Hessians and a central
    finite difference of the bracket otherwise.
    """
    def value(y):
        return lie_bracket(V, W, y)

    if V.hessian is not None and W.hessian is not None:
        def jacobian(y):
            v, w = V.value(y), W.value(y)
            dv, dw = V.jacobian(y), W.jacobian(y)
            return (np.einsum("...abc,...b->...ac", W.hessian(y), v)
                    + np.einsum("...ab,...bc->...ac", dw, dv)
                    - np.einsum("...abc,...b->...ac", V.hessian(y), w)
                    - np.einsum("...ab,...bc->...ac", dv, dw))
    else:
        def jacobian(y):
            return _fd_jacobian(value, y)
    return Field(value, jacobian)


def numerical_rank(vectors, tol=1e-8):
    """Number of singular values above ``tol`` times the largest one."""
    m = np.atleast_2d(np.asarray(vectors, dtype=float))
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def hormander_rank(system, a, max_depth=4, tol=1e-8):
    """Rank of the bracket-generated family at ``a``.

    Level 1 holds V_1..V_d; level k holds [V_i, W] for 0 <= i <= d and W
    in level k-1.  Returns ``(rank, depth)`` where ``depth`` is the first
    level at which the rank reaches e, or ``max_depth`` if it never does.
    """
    if max_depth < 1:
        raise InvalidArgument("max_depth must be at least 1")
    a = np.asarray(a, dtype=float)
    generators = system.fields()
    level = generators[1:]
    collected = []
    rank = 0
    for depth in range(1, max_depth + 1):
        if depth > 1:
            level = [bracket_field(V, W) for W in level for V in generators]
        collected += [W.value(a) for W in level]
        rank = numerical_rank(collected, tol)
        if rank == system.e:
            return rank, depth
    return rank, max_depth


# --- smooth truncation --------------------------------------------------------

def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    s = u ** 3 * (10 - 15 * u + 6 * u ** 2)
    ds = 30 * u ** 2 * (1 - u) ** 2
    d2s = 60 * u * (1 - u) * (1 - 2 * u)
    return s, ds, d2s


def radial_cutoff(y, radius, width):
    """chi(|y|) = 1 inside ``radius``, 0 beyond ``radius + width``, C^2 in between.

    Returns the value, gradient and Hessian.
    """
    r = np.linalg.norm(y, axis=-1)
    s, ds, d2s = _smoothstep((r - radius) / width)
    chi = 1.0 - s
    c1 = -ds / width
    c2 = -d2s / width ** 2
    rs = np.where(r > 0, r, 1.0)
    u = y / rs[..., None]
    grad = c1[..., None] * u
    eye = np.eye(y.shape[-1])
    uu = u[..., :, None] * u[..., None, :]
    hess = c2[..., None, None] * uu + (c1 / rs)[..., None, None] * (eye - uu)
    return chi, grad, hess


# --- polynomial fields -------------------------------------------------------

class _Polynomial:
    """Vector-valued polynomial: coefficient array (n_out, M) on M monomials.

    Monomial derivatives are evaluated from precomputed tables of falling
    factorials and reduced exponents, so one call costs a few array ops.
    """

    def __init__(self, exponents, coefficients):
        self.exponents = np.asarray(exponents, dtype=int).reshape(-1, np.shape(exponents)[-1])
        self.coefficients = np.asarray(coefficients, dtype=float)
        self._tables = [self._table(order) for order in range(3)]

    def _table(self, order):
        E = self.exponents
        M, e = E.shape
        eye = np.eye(e, dtype=int)
        drops = [np.zeros((1, e), dtype=int), eye, (eye[:, None] + eye[None, :]).reshape(-1, e)][order]
        D = np.broadcast_to(drops[:, None, :], (len(drops), M, e))
        A = E[None] - D
        falling = np.where(D == 0, 1, np.where(D == 1, E, E * (E - 1)))
        coef = np.prod(np.where(A >= 0, falling, 0), axis=-1).astype(float)
        return coef, np.clip(A, 0, 3)

    @property
    def degree(self):
        return self.row_degrees().max(initial=0)

    def row_degrees(self):
        deg = self.exponents.sum(axis=1)
        return np.array([deg[row != 0].max(initial=0) for row in self.coefficients], dtype=int)

    def __call__(self, y, order):
        e = y.shape[-1]
        pw = y[..., :, None] ** np.arange(4)  # (..., e, 4); 0**0 = 1
        k = np.arange(e)
        res = []
        for o in range(order + 1):
            coef, idx = self._tables[o]
            mono = coef * np.prod(pw[..., k, idx], axis=-1)  # (..., P, M)
            r = mono @ self.coefficients.T  # (..., P, n_out)
            if o == 0:
                res.append(r[..., 0, :])
            elif o == 1:
                res.append(np.swapaxes(r, -1, -2))
            else:
                res.append(np.moveaxis(r.reshape(r.shape[:-2] + (e, e, -1)), -1, -3))
        return res


def _truncated(poly, radius, width):
    """chi * poly with product-rule derivatives; constant output rows are left alone."""
    cut = poly.row_degrees() > 0
    if not cut.any():
        return poly

    def f(y, order):
        p = poly(y, order)
        chi, g, h = radial_cutoff(y, radius, width)
        c = np.where(cut, chi[..., None], 1.0)
        g = cut[:, None] * g[..., None, :]
        out = [c * p[0]]
        if order >= 1:
            out.append(c[..., None] * p[1] + p[0][..., :, None] * g)
        if order >= 2:
            gp = p[1][..., :, :, None] * g[..., :, None, :]
            out.append(c[..., None, None] * p[2] + gp + np.swapaxes(gp, -1, -2)
                       + p[0][..., :, None, None] * cut[:, None, None] * h[..., None, :, :])
        return out
    return f


def _parse_field(spec, e, what):
    """Field spec: list of e dicts mapping 'a1,...,ae' exponent strings to coefficients."""
    if not isinstance(spec, (list, tuple)) or len(spec) != e:
        raise InvalidArgument(f"{what}: expected a list of {e} output components")
    keys = {}
    for comp in spec:
        if not isinstance(comp, dict):
            raise InvalidArgument(f"{what}: each output component must map multi-indices to coefficients")
        for k in comp:
            try:
                alpha = tuple(int(s) for s in str(k).split(","))
            except ValueError:
                raise InvalidArgument(f"{what}: malformed multi-index {k!r}") from None
            if len(alpha) != e or min(alpha) < 0:
                raise InvalidArgument(f"{what}: multi-index {k!r} needs {e} non-negative entries")
            if sum(alpha) > 3:
                raise InvalidArgument(f"{what}: total degree of {k!r} exceeds 3")
            keys.setdefault(alpha, len(keys))
    exps = np.array(sorted(keys), dtype=int).reshape(-1, e)
    index = {tuple(a): m for m, a in enumerate(exps)}
    coef = np.zeros((e, len(exps)))
    for o, comp in enumerate(spec):
        for k, c in comp.items():
            c = float(c)
            if not math.isfinite(c):
                raise InvalidArgument(f"{what}: non-finite coefficient")
            coef[o, index[tuple(int(s) for s in str(k).split(","))]] += c
    return _Polynomial(exps, coef)


def _assemble(e, d, f):
    """Split the stacked rows [V_0, ..., V_d] of ``f`` into (sigma, b) and derivatives."""
    def evaluate(y, order):
        p = f(y, order)
        batch = y.shape[:-1]
        rows = p[0].reshape(batch + (d + 1, e))
        out = [np.swapaxes(rows[..., 1:, :], -1, -2), rows[..., 0, :]]
        if order >= 1:
            r = p[1].reshape(batch + (d + 1, e, e))
            out += [np.moveaxis(r[..., 1:, :, :], -3, -2), r[..., 0, :, :]]
        if order >= 2:
            r = p[2].reshape(batch + (d + 1, e, e, e))
            out += [np.moveaxis(r[..., 1:, :, :, :], -4, -3), r[..., 0, :, :, :]]
        return tuple(out)
    return evaluate


def polynomial_system(e, d, fields, radius=1e3, width=1e2, name="polynomial", params=None):
    """Polynomial fields of total degree <= 3, smoothly cut off outside a ball.

    ``fields`` lists V_0, V_1, ..., V_d, each as e dicts from exponent strings
    such as ``"1,0"`` to coefficients.
    """
    if int(e) != e or int(d) != d or e < 1 or d < 1:
        raise InvalidArgument("dimensions e and d must be positive integers")
    if not isinstance(fields, (list, tuple)) or len(fields) != d + 1:
        raise InvalidArgument(f"expected {d + 1} fields (drift first), got {len(fields) if isinstance(fields, (list, tuple)) else fields!r}")
    if not (radius > 0 and width > 0):
        raise InvalidArgument("truncation radius and width must be positive")
    polys = [_parse_field(f, e, f"field V_{i}") for i, f in enumerate(fields)]
    exps = sorted({tuple(x) for p in polys for x in p.exponents})
    index = {x: m for m, x in enumerate(exps)}
    coef = np.zeros(((d + 1) * e, len(exps)))
    for i, p in enumerate(polys):
        for m, x in enumerate(p.exponents):
            coef[i * e:(i + 1) * e, index[tuple(x)]] += p.coefficients[:, m]
    stacked = _Polynomial(np.array(exps, dtype=int).reshape(-1, e), coef)
    smooth = math.inf if stacked.degree == 0 else 2
    if params is None:
        params = {"e": e, "d": d, "fields": fields, "radius": radius, "width": width}
    return VectorFieldSystem(int(e), int(d), _assemble(e, d, _truncated(stacked, radius, width)),
                             name, params, smooth)


# --- catalog -----------------------------------------------------------------

def additive(d=1, scale=1.0, drift=None):
    """Constant fields sigma = scale * I_d, b = drift."""
    d = int(d)
    bvec = np.zeros(d) if drift is None else np.asarray(drift, dtype=float)
    if bvec.shape != (d,):
        raise InvalidArgument(f"drift must have {d} entries")
    S = float(scale) * np.eye(d)

    def evaluate(y, order):
        batch = y.shape[:-1]
        out = [np.broadcast_to(S, batch + (d, d)), np.broadcast_to(bvec, batch + (d,))]
        if order >= 1:
            out += [np.zeros(batch + (d, d, d)), np.zeros(batch + (d, d))]
        if order >= 2:
            out += [np.zeros(batch + (d, d, d, d)), np.zeros(batch + (d, d, d))]
        return tuple(out)

    params = {"d": d, "scale": float(scale), "drift": bvec.tolist()}
    return VectorFieldSystem(d, d, evaluate, "additive", params)


def scalar_linear(drift=0.0, radius=1e3, width=1e2):
    """e = d = 1 with V_1(y) = y and V_0(y) = drift * y, cut off far away."""
    fields = [[{"1": float(drift)}], [{"1": 1.0}]]
    params = {"drift": float(drift), "radius": radius, "width": width}
    return polynomial_system(1, 1, fields, radius, width, "scalar-linear", params)


def heisenberg(radius=1e3, width=1e2):
    """e = 3, d = 2: V_1 = (1, 0, 0), V_2 = (0, 1, y_1), no drift."""
    zero = [{}, {}, {}]
    fields = [zero, [{"0,0,0": 1.0}, {}, {}], [{}, {"0,0,0": 1.0}, {"1,0,0": 1.0}]]
    return polynomial_system(3, 2, fields, radius, width, "heisenberg",
                             {"radius": radius, "width": width})


def _rot(th):
    c, s = np.cos(th), np.sin(th)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _drot(th):
    c, s = np.cos(th), np.sin(th)
    return np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)


def elliptic_rot2d(kappa=0.5, beta=0.2):
    """sigma(y) = rotation by kappa (sin y_1 + cos y_2), b(y) = beta (cos y_2, sin y_1).

    sigma(y) is orthogonal everywhere, so the system is uniformly elliptic,
    and all derivatives are bounded.
    """
    kappa, beta = float(kappa), float(beta)

    def evaluate(y, order):
        y1, y2 = y[..., 0], y[..., 1]
        th = kappa * (np.sin(y1) + np.cos(y2))
        R = _rot(th)
        out = [R, beta * np.stack([np.cos(y2), np.sin(y1)], -1)]
        if order >= 1:
            gth = kappa * np.stack([np.cos(y1), -np.sin(y2)], -1)
            dR = _drot(th)
            out.append(dR[..., None] * gth[..., None, None, :])
            z = np.zeros_like(y1)
            out.append(beta * np.stack([np.stack([z, -np.sin(y2)], -1),
                                        np.stack([np.cos(y1), z], -1)], -2))
        if order >= 2:
            z = np.zeros_like(y1)
            hth = kappa * np.stack([np.stack([-np.sin(y1), z], -1),
                                    np.stack([z, -np.cos(y2)], -1)], -2)
            gg = gth[..., :, None] * gth[..., None, :]
            out.append(-R[..., None, None] * gg[..., None, None, :, :]
                       + dR[..., None, None] * hth[..., None, None, :, :])
            d2b = np.zeros(y.shape[:-1] + (2, 2, 2))
            d2b[..., 0, 1, 1] = -beta * np.cos(y2)
            d2b[..., 1, 0, 0] = -beta * np.sin(y1)
            out.append(d2b)
        return tuple(out)

    return VectorFieldSystem(2, 2, evaluate, "elliptic-rot2d", {"kappa": kappa, "beta": beta})


def mix_drivers(system, M):
    """The system with sigma replaced by sigma @ M (M invertible d x d).

    Solutions satisfy Psi_mixed(h) = Psi(M h), so this realises a linear
    change of driver coordinates.
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (system.d, system.d):
        raise InvalidArgument(f"mixing matrix must be {system.d} x {system.d}")
    if abs(np.linalg.det(M)) < 1e-12:
        raise InvalidArgument("mixing matrix is singular")

    def evaluate(y, order):
        out = list(system.evaluate(y, order))
        out[0] = out[0] @ M
        if order >= 1:
            out[2] = np.einsum("...aik,ij->...ajk", out[2], M)
        if order >= 2:
            out[4] = np.einsum("...aikl,ij->...ajkl", out[4], M)
        return tuple(out)

    params = {"base": system.spec, "mix": M.tolist()}
    return VectorFieldSystem(system.e, system.d, evaluate, "mixed", params, system.smoothness)


CATALOG = {
    "additive": additive,
    "scalar-linear": scalar_linear,
    "elliptic-rot2d": elliptic_rot2d,
    "heisenberg": heisenberg,
    "polynomial": polynomial_system,
}


def catalog(name, **params):
    """Instantiate a named system; see ``CATALOG`` for the available names."""
    if name not in CATALOG:
        raise InvalidArgument(f"unknown vector field system {name!r}; choose from {sorted(CATALOG)}")
    try:
        return CATALOG[name](**params)
    except TypeError as exc:
        raise InvalidArgument(f"bad parameters for {name!r}: {exc}") from None
