import json

import numpy as np
import pytest

from gaussrde.errors import InvalidArgument, NotElliptic
from gaussrde.gaussian_driver import GridPath, TimeGrid, build_kl_basis, project
from gaussrde.positivity import (CERTIFIED, NOT_CERTIFIED, CertifyOptions, PositivityCertificate,
                                 certify, elliptic_reach, replay_on_grid, verify)
from gaussrde.solvers import solve_young
from gaussrde.vector_fields import catalog, mix_drivers, polynomial_system

GRID = TimeGrid(1.0, 32)
ZERO = polynomial_system(2, 1, [[{}, {}], [{}, {}]])


@pytest.fixture(scope="module")
def elliptic():
    vf = catalog("elliptic-rot2d")
    return vf, build_kl_basis(GRID, 0.4, d=vf.d)


@pytest.fixture(scope="module")
def elliptic_cert(elliptic):
    vf, B = elliptic
    return certify([0.6, -0.4], 1.0, vf, [0.0, 0.0], B, 6)


def test_free_solution_endpoint_certifies_at_zero_control(elliptic):
    vf, B = elliptic
    z = solve_young(GridPath.zeros(GRID, 2), vf, [0.1, 0.2]).final
    cert = certify(z, 1.0, vf, [0.1, 0.2], B, 6)
    assert cert.verdict == CERTIFIED
    assert cert.residual < 1e-6 and cert.cm_norm < 1e-6
    assert cert.optimizer["start"] == 0
    assert cert.lambda_min >= cert.delta_rank


def test_reachable_target_certifies_and_verifies(elliptic, elliptic_cert):
    vf, B = elliptic
    cert = elliptic_cert
    assert cert.certified and cert.residual < cert.eps_res
    assert cert.eps_res == pytest.approx(1e-6 * (1 + np.hypot(0.6, 0.4)))
    y = solve_young(cert.control(B).realization, vf, [0.0, 0.0]).final
    assert np.linalg.norm(y - np.array([0.6, -0.4])) == pytest.approx(cert.residual, abs=1e-12)
    assert verify(cert, vf, [0.0, 0.0], B)


def test_optimizer_trace_descends(elliptic_cert):
    trace = elliptic_cert.optimizer["objective"]
    assert len(trace) == elliptic_cert.optimizer["accepted_steps"] + 1
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_json_round_trip_and_tampering(elliptic, elliptic_cert):
    vf, B = elliptic
    text = json.dumps(elliptic_cert.to_json())
    back = PositivityCertificate.from_json(json.loads(text))
    assert back == elliptic_cert
    assert verify(back, vf, [0.0, 0.0], B)
    tampered = PositivityCertificate.from_json({**back.to_json(), "residual": back.residual + 1e-6})
    assert not verify(tampered, vf, [0.0, 0.0], B)
    forged = PositivityCertificate.from_json({**back.to_json(), "verdict": NOT_CERTIFIED})
    assert not verify(forged, vf, [0.0, 0.0], B)


def test_verify_rejects_foreign_configuration(elliptic, elliptic_cert):
    vf, B = elliptic
    with pytest.raises(InvalidArgument):
        verify(elliptic_cert, catalog("elliptic-rot2d", kappa=0.7), [0.0, 0.0], B)
    with pytest.raises(InvalidArgument):
        verify(elliptic_cert, vf, [0.0, 0.1], B)
    with pytest.raises(InvalidArgument):
        verify(elliptic_cert, vf, [0.0, 0.0], build_kl_basis(GRID, 0.45, d=2))


def test_replay_on_finer_grid(elliptic, elliptic_cert):
    vf, B = elliptic
    for K in (64, 128):
        residual, within = replay_on_grid(elliptic_cert, vf, [0.0, 0.0], B, TimeGrid(1.0, K))
        assert within and residual < 10 * elliptic_cert.eps_res
    with pytest.raises(InvalidArgument):
        replay_on_grid(elliptic_cert, vf, [0.0, 0.0], B, TimeGrid(1.0, 48))


def test_additive_certifies_and_explicit_ramp_reaches_target():
    vf = catalog("additive", d=1)
    B = build_kl_basis(TimeGrid(1.0, 16), 0.4)
    a, t = np.array([0.5]), 0.75
    for z in ([-1.2], [0.5], [3.0]):
        cert = certify(z, t, vf, a, B, 4)
        assert cert.certified
        s = np.minimum(B.grid.points, t)
        ramp = GridPath(B.grid, ((np.array(z) - a) * s[:, None] / t))
        h, _ = project(ramp, B, B.n_max)
        y = solve_young(h.realization, vf, a).at(t)
        assert y == pytest.approx(z, abs=1e-10)


def test_zero_fields_never_certify():
    B = build_kl_basis(GRID, 0.4)
    a, z = np.array([0.2, -0.1]), np.array([1.0, 1.0])
    cert = certify(z, 1.0, ZERO, a, B, 4)
    assert cert.verdict == NOT_CERTIFIED
    assert cert.residual == pytest.approx(np.linalg.norm(z - a), rel=1e-14)
    assert np.allclose(cert.optimizer["start_residuals"], np.linalg.norm(z - a), rtol=1e-14)
    assert cert.lambda_min == 0 and not verify(cert, ZERO, a, B)


def test_driver_rotation_equivariance(elliptic):
    vf, B = elliptic
    opts = CertifyOptions(n_starts=1)
    z = [0.3, 0.5]
    base = certify(z, 1.0, vf, [0.0, 0.0], B, 6, opts)
    rng = np.random.default_rng(4)
    for _ in range(3):
        Q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
        rot = certify(z, 1.0, mix_drivers(vf, Q), [0.0, 0.0], B, 6, opts)
        assert abs(rot.residual - base.residual) < 1e-6
        assert np.allclose(np.array(rot.coefficients) @ Q.T, base.coefficients, atol=1e-6)


def test_certify_is_worker_independent(elliptic):
    vf, B = elliptic
    a = certify([-0.5, 0.8], 1.0, vf, [0.0, 0.0], B, 4, CertifyOptions(workers=1))
    b = certify([-0.5, 0.8], 1.0, vf, [0.0, 0.0], B, 4, CertifyOptions(workers=4))
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


def test_certify_validates_inputs(elliptic):
    vf, B = elliptic
    with pytest.raises(InvalidArgument):
        certify([0.0], 1.0, vf, [0.0, 0.0], B, 4)
    with pytest.raises(InvalidArgument):
        certify([0.0, 0.0], 1.5, vf, [0.0, 0.0], B, 4)
    with pytest.raises(InvalidArgument):
        certify([0.0, 0.0], 1.0, catalog("heisenberg"), np.zeros(3), build_kl_basis(GRID, 0.4, d=2), 1)


def test_elliptic_reach_examples(elliptic):
    vf, _ = elliptic
    rng = np.random.default_rng(7)
    for _ in range(5):
        z = rng.standard_normal(2)
        z *= rng.uniform() / np.linalg.norm(z)
        h = elliptic_reach(z, 1.0, vf, [0.0, 0.0], GRID)
        assert np.linalg.norm(solve_young(h, vf, [0.0, 0.0]).final - z) < 1e-6
    add = catalog("additive", d=1)
    h = elliptic_reach([2.0], 0.5, add, [0.5], GRID)
    s = np.minimum(GRID.points, 0.5)
    assert np.allclose(h.values[:, 0], 1.5 * s / 0.5, atol=1e-12)
    with pytest.raises(NotElliptic):
        elliptic_reach([1.0, 0.0, 0.0], 1.0, catalog("heisenberg"), np.zeros(3), GRID)
