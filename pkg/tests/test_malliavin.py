import numpy as np
import pytest

from gaussrde.errors import InvalidArgument
from gaussrde.gaussian_driver import TimeGrid, build_kl_basis, fbm_covariance
from gaussrde.malliavin import sampled_malliavin_spectrum, skeleton_malliavin
from gaussrde.solvers import jacobian_flow
from gaussrde.vector_fields import catalog, polynomial_system


def random_control(basis, N, seed, scale=1.0):
    c = scale * np.random.default_rng(seed).standard_normal((N, basis.d))
    return basis.element(c)


@pytest.mark.parametrize("H", [0.3, 0.4, 0.5])
def test_additive_full_truncation_recovers_the_covariance_diagonal(H):
    g = TimeGrid(1.0, 32)
    B = build_kl_basis(g, H)
    vf = catalog("additive", d=1)
    h = B.element(np.zeros((1, 1)))
    for t in (0.25, 0.5, 1.0):
        C = skeleton_malliavin(h, B, B.n_max, vf, [0.0], t)
        assert C.C[0, 0] == pytest.approx(fbm_covariance(t, t, H), rel=1e-9)
        partial = skeleton_malliavin(h, B, 4, vf, [0.0], t)
        assert partial.C[0, 0] < C.C[0, 0]


def test_zero_fields_give_zero_matrix():
    g = TimeGrid(1.0, 16)
    B = build_kl_basis(g, 0.4, d=1)
    zero = polynomial_system(2, 1, [[{}, {}], [{}, {}]])
    C = skeleton_malliavin(random_control(B, 5, 0), B, 8, zero, [0.3, -0.1], 1.0)
    assert np.all(C.C == 0) and C.lambda_min == 0


def test_constant_sigma_is_a_congruence_of_the_driver_gram():
    g = TimeGrid(1.0, 32)
    B = build_kl_basis(g, 0.4, d=2)
    sigma = np.array([[1.0, 0.5], [-0.3, 2.0]])
    vf = polynomial_system(2, 2, [[{}, {}], [{"0,0": sigma[0, 0]}, {"0,0": sigma[1, 0]}],
                                  [{"0,0": sigma[0, 1]}, {"0,0": sigma[1, 1]}]])
    k = 24
    t = g.points[k]
    for N in (1, 2, 6):
        # driver-only Gram by direct quadrature: sum_i h_i(t)^2 in each driver component
        M = np.sum(B.modes[:N, k] ** 2) * np.eye(2)
        C = skeleton_malliavin(random_control(B, 3, 1), B, N, vf, [0.0, 0.0], t)
        assert np.allclose(C.C, sigma @ M @ sigma.T, rtol=1e-10, atol=1e-14)
        if N >= 1:
            assert C.lambda_min > 0


def test_matrix_is_symmetric_psd_with_sorted_eigenvalues():
    g = TimeGrid(1.0, 32)
    for name in ("elliptic-rot2d", "heisenberg"):
        vf = catalog(name)
        B = build_kl_basis(g, 0.4, d=vf.d)
        for seed in range(3):
            C = skeleton_malliavin(random_control(B, 6, seed), B, 6, vf, np.zeros(vf.e), 1.0)
            assert np.array_equal(C.C, C.C.T)
            assert np.all(np.diff(C.eigenvalues) >= 0)
            assert C.lambda_min >= -1e-10 * C.eigenvalues[-1]
            assert np.allclose(np.linalg.eigvalsh(C.C), C.eigenvalues)


def test_eigenvalues_nondecreasing_in_truncation():
    g = TimeGrid(1.0, 32)
    for name in ("elliptic-rot2d", "heisenberg"):
        vf = catalog(name)
        B = build_kl_basis(g, 0.4, d=vf.d)
        for seed in range(3):
            h = random_control(B, 16, seed)
            eig = [skeleton_malliavin(h, B, N, vf, np.zeros(vf.e), 1.0).eigenvalues for N in (2, 4, 8, 16)]
            for lo, hi in zip(eig, eig[1:]):
                assert np.all(hi >= lo - 1e-12 * max(1.0, hi[-1]))


def test_invariant_under_orthogonal_remixing_of_modes():
    g = TimeGrid(1.0, 32)
    vf = catalog("elliptic-rot2d")
    B = build_kl_basis(g, 0.4, d=vf.d)
    rng = np.random.default_rng(5)
    N = 6
    h = random_control(B, N, 2)
    C = skeleton_malliavin(h, B, N, vf, [0.2, 0.1], 1.0).C
    flow = jacobian_flow(h.realization, vf, [0.2, 0.1])
    for _ in range(4):
        Q, _ = np.linalg.qr(rng.standard_normal((N, N)))
        mixed = Q @ B.modes[:N]
        directions = []
        for row in mixed:
            for j in range(vf.d):
                v = np.zeros((g.K + 1, vf.d))
                v[:, j] = row
                directions.append(v)
        D = flow.derivative_matrix(np.array(directions))
        assert np.max(np.abs(D @ D.T - C)) < 1e-8


def test_skeleton_rejects_bad_truncation_and_foreign_controls():
    g = TimeGrid(1.0, 16)
    B = build_kl_basis(g, 0.4, d=2)
    vf = catalog("elliptic-rot2d")
    with pytest.raises(InvalidArgument):
        skeleton_malliavin(random_control(B, 2, 0), B, B.n_max + 1, vf, [0, 0], 1.0)
    other = build_kl_basis(TimeGrid(1.0, 8), 0.4, d=2)
    with pytest.raises(InvalidArgument):
        skeleton_malliavin(random_control(other, 2, 0), B, 2, vf, [0, 0], 1.0)


def test_additive_spectrum_is_a_point_mass():
    g = TimeGrid(1.0, 32)
    s = sampled_malliavin_spectrum(0.4, catalog("additive", d=2), [0.0, 0.0], 1.0, 8, 50, 0, g)
    assert np.ptp(s.lambda_min) < 1e-12 * s.lambda_min[0]
    assert s.quantiles[0.0] == pytest.approx(s.quantiles[1.0], rel=1e-12)
    assert s.n_diverged == 0


def test_elliptic_spectrum_has_no_small_eigenvalues():
    g = TimeGrid(1.0, 32)
    s = sampled_malliavin_spectrum(0.4, catalog("elliptic-rot2d"), [0.0, 0.0], 1.0, 8, 1000, 0, g)
    assert s.tail[1e-6] == 0.0
    assert s.quantiles[0.0] > 1e-3
    record = s.to_json()
    assert "not a proof" in record["diagnostic"] and record["config"]["n_samples"] == 1000


def test_heisenberg_spectrum_positive_at_six_modes():
    g = TimeGrid(1.0, 32)
    s = sampled_malliavin_spectrum(0.4, catalog("heisenberg"), np.zeros(3), 1.0, 6, 300, 1, g)
    assert np.all(s.lambda_min > 0)


def test_spectrum_is_worker_independent():
    g = TimeGrid(1.0, 16)
    vf = catalog("elliptic-rot2d")
    a = sampled_malliavin_spectrum(0.4, vf, [0.0, 0.0], 1.0, 4, 1100, 3, g)
    b = sampled_malliavin_spectrum(0.4, vf, [0.0, 0.0], 1.0, 4, 1100, 3, g, workers=4)
    assert a.lambda_min.tobytes() == b.lambda_min.tobytes()
    with pytest.raises(InvalidArgument):
        sampled_malliavin_spectrum(0.4, vf, [0.0, 0.0], 1.0, 4, 0, 3, g)
