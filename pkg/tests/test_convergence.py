"""Edge-matrix recursions, spectral radii, fixed points."""

import json

import numpy as np
import pytest

from gridbp import Measurement, MeasurementSet, ScheduleConfig, build_dc_graph, \
    run_dc_bp
from gridbp import convergence as cv
from gridbp.engine import CompiledGraph, init_from_fv, init_state, \
    run_message_passing
from gridbp.errors import ConvergenceError

from conftest import random_dc_measurements, random_small_grid


def _compiled(grid, ms):
    return CompiledGraph.from_factor_graph(build_dc_graph(grid, ms))


def test_variance_fixed_point_unique(grid3, demo_measurements):
    sys = cv.edge_system(_compiled(grid3, demo_measurements))
    rng = np.random.default_rng(0)
    a = cv.variance_fixed_point(sys, rng.uniform(0.1, 10.0, sys.b))
    b = cv.variance_fixed_point(sys, rng.uniform(1e-6, 1e6, sys.b))
    assert np.max(np.abs(a - b) / a) < 1e-10


def test_uncoupled_graph_has_zero_omega(grid3):
    # anchor both arguments of the only coupled factor directly
    ms = MeasurementSet([
        Measurement("p_flow", 1.0, 1e-4, branch=(1, 2)),
        Measurement("v_angle", 0.0, 1e-6, bus=1),
        Measurement("v_angle", -0.04, 1e-6, bus=2),
    ])
    sys = cv.edge_system(_compiled(grid3, ms))
    v_hat = cv.variance_fixed_point(sys)
    omega = cv.assemble_omega(sys, v_hat)
    assert not sys.shared_var.any()
    assert np.allclose(omega, 0.0)
    fp = cv.fixed_point_means(cv.mean_offset(sys, v_hat), omega)
    assert fp == pytest.approx(cv.mean_offset(sys, v_hat))


def test_demo_graph_contracts(grid3, demo_measurements):
    sys = cv.edge_system(_compiled(grid3, demo_measurements))
    v_hat = cv.variance_fixed_point(sys)
    assert cv.spectral_radius(cv.assemble_omega(sys, v_hat)) < 1.0


def test_recursions_reproduce_messages(grid3, demo_measurements):
    cg = _compiled(grid3, demo_measurements)
    sys = cv.edge_system(cg)
    rng = np.random.default_rng(8)
    z0 = rng.normal(size=cg.b)
    v0 = rng.uniform(0.5, 2.0, cg.b)
    trace = []
    state = init_from_fv(cg, z0, v0)
    run_message_passing(cg, state, 20, 0.0,
                        trace=lambda it, st: trace.append(
                            (st.z_fv.copy(), st.v_fv.copy())))
    z, v = z0.copy(), v0.copy()
    for zt, vt in trace:
        z_next = cv.mean_step(sys, z, v)
        v_next = cv.variance_step(sys, v)
        assert np.max(np.abs(z_next - zt) / (1 + np.abs(zt))) < 1e-10
        assert np.max(np.abs(v_next - vt) / (1 + np.abs(vt))) < 1e-10
        z, v = z_next, v_next


def test_omega_invariant_to_value_scaling(grid14, truth14_dc):
    rng = np.random.default_rng(21)
    ms = random_dc_measurements(grid14, rng)
    sys = cv.edge_system(_compiled(grid14, ms))
    scaled = MeasurementSet([
        Measurement(m.kind, 10.0 * m.value, m.variance, bus=m.bus,
                    branch=m.branch) for m in ms])
    sys2 = cv.edge_system(_compiled(grid14, scaled))
    v1 = cv.variance_fixed_point(sys)
    v2 = cv.variance_fixed_point(sys2)
    assert np.array_equal(cv.assemble_omega(sys, v1),
                          cv.assemble_omega(sys2, v2))


def test_spectral_radius_basics():
    assert cv.spectral_radius(np.zeros((0, 0))) == 0.0
    assert cv.spectral_radius(np.zeros((3, 3))) == 0.0
    assert cv.spectral_radius(np.diag([0.3, -0.9])) == pytest.approx(0.9)


def test_spectral_radius_matches_characteristic_roots():
    rng = np.random.default_rng(17)
    for _ in range(20):
        a = rng.normal(size=(5, 5))
        expected = np.max(np.abs(np.roots(np.poly(a))))
        assert cv.spectral_radius(a) == pytest.approx(expected, rel=1e-8)


def test_damped_matrix_algebra():
    omega = np.array([[0.2, 0.5], [0.1, -0.3]])
    none = cv.assemble_omega_damped(omega, np.zeros(2, dtype=bool), 0.4)
    assert np.array_equal(none, omega)
    full = cv.assemble_omega_damped(omega, np.ones(2, dtype=bool), 0.4)
    assert np.allclose(full, 0.6 * omega - 0.4 * np.eye(2))


def test_fixed_point_and_marginals(grid3, demo_measurements):
    cg = _compiled(grid3, demo_measurements)
    sys = cv.edge_system(cg)
    v_hat = cv.variance_fixed_point(sys)
    omega = cv.assemble_omega(sys, v_hat)
    z_tilde = cv.mean_offset(sys, v_hat)
    z_hat = cv.fixed_point_means(z_tilde, omega)
    means, _ = cv.marginal_from_edges(cg, z_hat, v_hat)
    run = run_dc_bp(build_dc_graph(grid3, demo_measurements),
                    ScheduleConfig(tol=1e-14))
    assert np.max(np.abs(means - run.means)) < 1e-8


def test_damped_recursion_same_fixed_point(grid14):
    rng = np.random.default_rng(31)
    ms = random_dc_measurements(grid14, rng)
    sys = cv.edge_system(_compiled(grid14, ms))
    v_hat = cv.variance_fixed_point(sys)
    omega = cv.assemble_omega(sys, v_hat)
    z_tilde = cv.mean_offset(sys, v_hat)
    mask = rng.random(sys.b) < 0.6
    omega_d = cv.assemble_omega_damped(omega, mask, 0.5)
    if cv.spectral_radius(omega_d) >= 1.0 or cv.spectral_radius(omega) >= 1.0:
        pytest.skip("non-contractive draw")
    z_bar = ((1.0 - mask.astype(float)) + 0.5 * mask) @ np.diag(z_tilde) \
        if False else (np.where(mask, 0.5, 1.0) * z_tilde)
    z = np.zeros(sys.b)
    for _ in range(20000):
        z_new = z_bar - omega_d @ z
        if np.max(np.abs(z_new - z)) < 1e-14:
            z = z_new
            break
        z = z_new
    expected = cv.fixed_point_means(z_tilde, omega)
    assert np.max(np.abs(z - expected)) < 1e-8


def test_noncontractive_rejected():
    with pytest.raises(ConvergenceError):
        cv.fixed_point_means(np.ones(2), np.diag([2.0, 0.1]))


def test_run_variances_reach_matrix_fixed_point(grid3, demo_measurements):
    cg = _compiled(grid3, demo_measurements)
    sys = cv.edge_system(cg)
    v_hat = cv.variance_fixed_point(sys)
    state = init_state(cg)
    run_message_passing(cg, state, 200, 0.0)
    assert np.max(np.abs(state.v_fv - v_hat) / v_hat) < 1e-10


def test_certificate_serializes(grid3, demo_measurements):
    graph = build_dc_graph(grid3, demo_measurements)
    cert = cv.certify(graph, damping_mask=np.array([True, False, True, False,
                                                    True]), alpha1=0.5)
    payload = json.loads(cert.to_json())
    assert payload["converges_synchronous"] is True
    assert payload["rho_randomized_damping"] is not None
    assert len(payload["edge_variances"]) == 5


def test_variance_initialization_independence_small_graphs():
    rng = np.random.default_rng(99)
    for _ in range(10):
        grid = random_small_grid(rng)
        ms = random_dc_measurements(grid, rng)
        sys = cv.edge_system(_compiled(grid, ms))
        if sys.b == 0:
            continue
        ref = cv.variance_fixed_point(sys)
        for _ in range(3):
            v0 = rng.uniform(1e-4, 1e4, sys.b)
            other = cv.variance_fixed_point(sys, v0)
            assert np.max(np.abs(other - ref) / ref) < 1e-10
