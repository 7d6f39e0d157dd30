"""Derivatives of the skeleton map and the truncated Malliavin matrix.

The first and second variations of the Young solution are checked against
central differences: halving the step should divide the error by four.
For maps that are quadratic in the control (additive, Heisenberg) the
differences are exact and only rounding is left.  Then we watch the
smallest eigenvalue of the truncated Malliavin matrix grow with the number
of KL modes, and sample its distribution over random drivers.

Run:  python demos/variations_and_malliavin.py [--quick]
"""

import sys

import numpy as np

from gaussrde import TimeGrid, build_kl_basis, catalog, sampled_malliavin_spectrum, skeleton_malliavin
from gaussrde.solvers import derivative_check


def main(quick=False):
    grid = TimeGrid(1.0, 32 if quick else 64)
    pairs = 5 if quick else 20
    print(f"{'system':>16} {'xi1 ratio':>18} {'xi2 ratio':>18} {'exact pairs':>12} {'Duhamel gap':>12}")
    for name in ("additive", "scalar-linear", "elliptic-rot2d", "heisenberg"):
        vf = catalog(name)
        basis = build_kl_basis(grid, 0.4, vf.d)
        rng = np.random.default_rng(0)
        h = basis.realize(rng.standard_normal((pairs, 8, vf.d)))
        l = basis.realize(8.0 * rng.standard_normal((pairs, 8, vf.d)))
        res = derivative_check(h, l, vf, np.full(vf.e, 0.3), grid)

        def span(q):
            r = res[q]["ratio"]
            return "exact" if np.all(np.isnan(r)) else f"[{np.nanmin(r):.3f}, {np.nanmax(r):.3f}]"
        n_exact = int(res["xi1"]["exact"].sum() + res["xi2"]["exact"].sum())
        print(f"{name:>16} {span('xi1'):>18} {span('xi2'):>18} {n_exact:>12} "
              f"{res['duhamel_diff'].max():>12.1e}")

    vf = catalog("heisenberg")
    basis = build_kl_basis(grid, 0.4, vf.d)
    h = basis.element(np.random.default_rng(1).standard_normal((16, 2)))
    print("\nHeisenberg, fixed control: eigenvalues of C as modes are added")
    for N in (1, 2, 4, 8, 16):
        C = skeleton_malliavin(h, basis, N, vf, np.zeros(3), 1.0)
        print(f"  N = {N:>2}: {np.array2string(C.eigenvalues, precision=4)}")

    n = 100 if quick else 1000
    stats = sampled_malliavin_spectrum(0.4, catalog("elliptic-rot2d"), [0.0, 0.0], 1.0, 8, n, 0, grid)
    print(f"\nelliptic-rot2d, {n} drivers, N = 8 (diagnostic, not a proof):")
    print("  quantiles of lambda_min: " + ", ".join(f"{q:g}: {v:.3g}" for q, v in stats.quantiles.items()))
    print("  P(lambda_min < tau):     " + ", ".join(f"{t:g}: {v:g}" for t, v in stats.tail.items()))


if __name__ == "__main__":
    main(quick="--quick" in sys.argv)
