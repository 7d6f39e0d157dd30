"""Truncated signatures of piecewise-linear paths and grid p-variation.

A rough path is stored as one increment tuple ``(x1, x2[, x3])`` per grid
interval.  Increments over longer intervals are recovered by Chen's
product.  All tensor operations broadcast over leading batch axes, which
is how the Monte Carlo code feeds many paths through at once.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .gaussian_driver import GridPath, TimeGrid


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def _outer3(a, b):
    # (.., d, d) x (.., d) and (.., d) x (.., d, d) both give (.., d, d, d)
    if a.ndim == b.ndim + 1:
        return a[..., :, :, None] * b[..., None, None, :]
    return a[..., :, None, None] * b[..., None, :, :]


def chen_compose(a, b):
    """Concatenate increments over [s, t] and [t, u] into the increment over [s, u]."""
    if len(a) != len(b):
        raise InvalidArgument("increments have different levels")
    out = [a[0] + b[0], a[1] + b[1] + _outer(a[0], b[0])]
    if len(a) == 3:
        out.append(a[2] + b[2] + _outer3(a[1], b[0]) + _outer3(a[0], b[1]))
    return tuple(out)


def chen_inverse(a):
    """Group inverse in the truncated tensor algebra."""
    out = [-a[0], -a[1] + _outer(a[0], a[0])]
    if len(a) == 3:
        a1a1a1 = _outer3(_outer(a[0], a[0]), a[0])
        out.append(-a[2] + _outer3(a[0], a[1]) + _outer3(a[1], a[0]) - a1a1a1)
    return tuple(out)


def segment_signature(v, level):
    """Signature of a straight segment with displacement ``v`` (tensor exponential)."""
    v = np.asarray(v, dtype=float)
    out = [v, 0.5 * _outer(v, v)]
    if level == 3:
        out.append(_outer3(out[1], v) / 3.0)
    return tuple(out)


def _check_level(level):
    if level not in (2, 3):
        raise InvalidArgument(f"only levels 2 and 3 are supported, got {level}")
    return level


@dataclass(frozen=True, eq=False)
class GeometricRoughPath:
    """Level-2 or level-3 rough path given by its increments over grid intervals.

    ``x1`` has shape (K, d), ``x2`` (K, d, d) and ``x3`` (K, d, d, d) or None.
    """

    grid: TimeGrid
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray | None = None
    p: float | None = None

    def __post_init__(self):
        K = self.grid.K
        x1 = np.asarray(self.x1, dtype=float)
        d = x1.shape[-1]
        if x1.shape != (K, d) or np.shape(self.x2) != (K, d, d):
            raise InvalidArgument("increment arrays do not match the grid")
        if self.x3 is not None and np.shape(self.x3) != (K, d, d, d):
            raise InvalidArgument("level-3 increments do not match the grid")
        if self.p is not None and not (2 <= self.p < 4):
            raise InvalidArgument(f"rough path exponent must lie in [2, 4), got {self.p}")

    @property
    def level(self):
        return 2 if self.x3 is None else 3

    @property
    def d(self):
        return self.x1.shape[1]

    @property
    def increments(self):
        return (self.x1, self.x2) if self.x3 is None else (self.x1, self.x2, self.x3)

    def increment(self, s, t):
        """Increment over grid interval [t_s, t_t] (indices), composed by Chen's product."""
        if not (0 <= s <= t <= self.grid.K):
            raise InvalidArgument(f"invalid index pair ({s}, {t})")
        acc = _zeros(self.d, self.level)
        for k in range(s, t):
            acc = chen_compose(acc, tuple(x[k] for x in self.increments))
        return acc

    def signature_path(self):
        """Increments S_{0,t_k} for k = 0..K as arrays with a leading (K+1) axis."""
        return _signature_from_zero(self.increments)


def _zeros(d, level, batch=()):
    return tuple(np.zeros(batch + (d,) * i) for i in range(1, level + 1))


def _signature_from_zero(incs):
    """Running Chen products along the interval axis; level i has the interval axis at -(i+1)."""
    level = len(incs)
    K = incs[0].shape[-2]
    d = incs[0].shape[-1]
    batch = incs[0].shape[:-2]
    cum = [np.zeros(batch + (K + 1,) + (d,) * i) for i in range(1, level + 1)]
    views = [np.moveaxis(c, -(i + 2), 0) for i, c in enumerate(cum)]
    steps = [np.moveaxis(x, -(i + 2), 0) for i, x in enumerate(incs)]
    acc = _zeros(d, level, batch)
    for k in range(K):
        acc = chen_compose(acc, tuple(s[k] for s in steps))
        for v, a in zip(views, acc):
            v[k + 1] = a
    return tuple(cum)


def _pair_increments(incs, level):
    """Level-``level`` increments over all grid pairs (a, b): shape (..., K+1, K+1, d^level)."""
    if level == 1:
        s = np.cumsum(incs[0], axis=-2)
        s = np.concatenate([np.zeros_like(s[..., :1, :]), s], axis=-2)
        return s[..., None, :, :] - s[..., :, None, :]
    sig = _signature_from_zero(incs[:level])
    left = chen_inverse(tuple(np.expand_dims(s, -(i + 2)) for i, s in enumerate(sig)))
    right = tuple(np.expand_dims(s, -(i + 3)) for i, s in enumerate(sig))
    return chen_compose(left, right)[level - 1]


def _pvar_dp(cost):
    """max over grid partitions 0 = k_0 < ... < k_m = K of sum cost[k_{j-1}, k_j].

    ``cost`` has shape (..., K+1, K+1); only the strict upper triangle is read.
    """
    n = cost.shape[-1]
    best = np.zeros(cost.shape[:-2] + (n,))
    for b in range(1, n):
        best[..., b] = np.max(best[..., :b] + cost[..., :b, b], axis=-1)
    return best[..., -1]


def _pair_norms(incs, level, other=None):
    table = _pair_increments(incs, level)
    if other is not None:
        table = table - _pair_increments(other, level)
    axes = tuple(range(-level, 0))
    return np.sqrt(np.sum(table ** 2, axis=axes))


def p_variation(x, i, p):
    """Level-i p/i-variation norm of ``x`` over partitions with points on the grid.

    Computed exactly by dynamic programming over the K+1 grid points, with
    Frobenius norms on each tensor level.  This is a lower bound for the
    supremum over all partitions of [0, T].
    """
    if not (1 <= i <= x.level):
        raise InvalidArgument(f"level index must lie in [1, {x.level}], got {i}")
    if p < i:
        raise InvalidArgument(f"exponent p={p} must be >= level {i}")
    return float(batch_p_variation(x.increments, i, p))


def batch_p_variation(incs, i, p, other=None):
    """Grid p/i-variation of level i for batched increment tuples.

    With ``other`` given, the variation of the difference of the two
    two-parameter level-i functions, i.e. the inhomogeneous level-i distance.
    """
    norms = _pair_norms(incs, i, other)
    return _pvar_dp(norms ** (p / i)) ** (i / p)


def lift(h, level):
    """Signature lift of the piecewise-linear path ``h`` up to ``level``."""
    _check_level(level)
    x = segment_signature(h.increments, level)
    return GeometricRoughPath(h.grid, *x)


def lift_increments(values, level):
    """Batched lift: grid values (..., K+1, d) -> increment tuple."""
    return segment_signature(np.diff(values, axis=-2), _check_level(level))


def translate_increments(incs, dh):
    """Young translation of batched increments by piecewise-linear increments ``dh``.

    Within each interval the cross integrals between h and the first level
    are evaluated with both treated as straight segments, which makes
    T_h L(k) = L(h + k) exact for piecewise-linear k.
    """
    level = len(incs)
    shifted = segment_signature(incs[0] + dh, level)
    base = segment_signature(incs[0], level)
    return tuple(x + s - b for x, s, b in zip(incs, shifted, base))


def young_translate(x, h):
    """Translate the rough path ``x`` by the grid path ``h``."""
    if h.grid != x.grid or h.d != x.d:
        raise InvalidArgument("rough path and translation path must share grid and dimension")
    return GeometricRoughPath(x.grid, *translate_increments(x.increments, h.increments), p=x.p)


def zero_rough_path(grid, level, d):
    """The neutral rough path: all increments zero."""
    _check_level(level)
    return GeometricRoughPath(grid, *_zeros(d, level, (grid.K,)))


def levelwise_distance(x, y):
    """Largest entrywise difference between two rough paths, over all levels and intervals."""
    if x.grid != y.grid or x.level != y.level:
        raise InvalidArgument("rough paths are not comparable")
    return max(float(np.max(np.abs(a - b))) for a, b in zip(x.increments, y.increments))


def _tensor_labels(prefix, d, level):
    return [prefix + "_" + "".join(str(j) for j in idx)
            for idx in itertools.product(range(d), repeat=level)]


def write_csv(x, path):
    """Write one row per grid interval: index, endpoints and flattened levels."""
    header = ["interval", "t_start", "t_end"]
    for i in range(1, x.level + 1):
        header += _tensor_labels(f"x{i}", x.d, i)
    t = x.grid.points
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for k in range(x.grid.K):
            row = [k, repr(float(t[k])), repr(float(t[k + 1]))]
            for a in x.increments:
                row += [repr(float(v)) for v in a[k].ravel()]
            writer.writerow(row)


def read_csv(path, T):
    """Inverse of ``write_csv``; the horizon is not stored in rows and must be given."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    d = sum(1 for h in header if h.startswith("x1_"))
    level = max(int(h[1]) for h in header if h.startswith("x"))
    K = body.shape[0]
    col = 3
    levels = []
    for i in range(1, level + 1):
        levels.append(body[:, col:col + d ** i].reshape((K,) + (d,) * i))
        col += d ** i
    return GeometricRoughPath(TimeGrid(T, K), *levels)
