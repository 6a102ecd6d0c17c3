"""Linear-model message passing: scalar algebra, golden run, schedules."""

import numpy as np
import pytest

from gridbp import (Measurement, MeasurementSet, ScheduleConfig, build_dc_graph,
                    dc_wls_estimate, run_dc_bp)
from gridbp.dcbp import (GaussianMessage, damp_means, factor_to_variable,
                         marginal, variable_to_factor)

from conftest import random_dc_measurements, random_small_grid


def test_variable_update_passthrough():
    out = variable_to_factor([GaussianMessage(0.0, 1e-60)])
    assert out.mean == 0.0
    assert out.variance == pytest.approx(1e-60, rel=1e-12)


def test_variable_update_worked_values():
    out = variable_to_factor([GaussianMessage(-0.066, 1e-6),
                              GaussianMessage(-0.0718, 1.6e-5)])
    assert out.mean == pytest.approx(-0.0663, abs=1e-4)
    assert out.variance == pytest.approx(9.4118e-7, abs=1e-10)


def test_variable_update_symmetry():
    out = variable_to_factor([GaussianMessage(1.0, 2.0),
                              GaussianMessage(3.0, 2.0)])
    assert out.mean == pytest.approx(2.0)


def test_factor_update_worked_values():
    out = factor_to_variable(1.795, 1e-2, 25.0,
                             [(-25.0, GaussianMessage(-0.066, 1e-6))])
    assert out.mean == pytest.approx(0.0058, abs=1e-4)
    assert out.variance == pytest.approx(1.7e-5, abs=1e-9)
    out = factor_to_variable(
        1.966, 1e-2, 90.0,
        [(-50.0, GaussianMessage(0.0, 1e-60)),
         (-40.0, GaussianMessage(-0.066, 1e-6))])
    assert out.mean == pytest.approx(-0.0075, abs=1e-4)
    assert out.variance == pytest.approx(1.4321e-6, abs=1e-10)


def test_factor_update_degree_one():
    out = factor_to_variable(2.0, 0.5, 4.0, [])
    assert out.mean == 0.5 and out.variance == pytest.approx(0.5 / 16)


def test_marginal_virtual_only():
    prior = GaussianMessage(0.3, 1e60)
    out = marginal([prior])
    assert out.mean == pytest.approx(0.3)


def test_damp_means_rules():
    cur = np.array([1.0, 2.0, 3.0])
    prev = np.array([0.0, 0.0, 0.0])
    assert damp_means(cur, prev, None, 0.5) == pytest.approx(cur)
    mask = np.array([True, False, True])
    assert damp_means(cur, prev, mask, 1.0) == pytest.approx([0.0, 2.0, 0.0])
    assert damp_means(cur, prev, mask, 0.4) == pytest.approx([0.6, 2.0, 1.8])


def test_golden_run(grid3, demo_measurements):
    graph = build_dc_graph(grid3, demo_measurements)
    res = run_dc_bp(graph, ScheduleConfig(tol=1e-14), keep_trace=True)
    assert res.converged and res.iterations == 3
    assert res.means == pytest.approx([0.0, -0.0663, -0.0076], abs=1e-4)
    assert res.variances == pytest.approx([1e-60, 9.4118e-7, 1.4205e-6],
                                          abs=1e-4)
    it1_z, it1_v = res.trace[0][1], res.trace[0][2]
    assert it1_z == pytest.approx([0.0058, -0.0718, 0.0135, -0.0491, -0.0075],
                                  abs=1e-4)
    assert it1_v[0] == pytest.approx(1.7e-5, abs=1e-9)
    assert it1_v[1] == pytest.approx(1.6e-5, abs=1e-9)
    assert it1_v[4] == pytest.approx(1.4321e-6, abs=1e-10)


def test_direct_only_set_converges_immediately(grid3):
    ms = MeasurementSet([Measurement("v_angle", 0.1 * b, 1e-6, bus=b)
                         for b in (1, 2, 3)])
    res = run_dc_bp(build_dc_graph(grid3, ms))
    assert res.converged and res.iterations == 1
    assert res.means[1:] == pytest.approx([0.2, 0.3])
    assert res.means[0] == pytest.approx(0.0, abs=1e-12)  # pinned reference


def test_bp_equals_wls(grid14, truth14_dc):
    rng = np.random.default_rng(77)
    ms = random_dc_measurements(grid14, rng, redundancy=3.0)
    res = run_dc_bp(build_dc_graph(grid14, ms), ScheduleConfig(tol=1e-13))
    if not res.converged:
        pytest.skip("draw happened to be non-contractive")
    wls = dc_wls_estimate(grid14, ms)
    assert np.max(np.abs(res.means[1:] - wls.state.theta[1:])) < 1e-8


def test_variances_stay_positive(grid3, demo_measurements):
    graph = build_dc_graph(grid3, demo_measurements)
    res = run_dc_bp(graph, ScheduleConfig(max_iter=50, tol=1e-300),
                    keep_trace=True)
    for _, _, v in res.trace:
        assert (v > 0).all()


def test_bit_identical_replay(grid14):
    rng = np.random.default_rng(3)
    ms = random_dc_measurements(grid14, rng, redundancy=2.0)
    sched = ScheduleConfig(mode="randomized_damping", p=0.6, alpha1=0.5,
                           seed=5, max_iter=200, tol=1e-300)
    a = run_dc_bp(build_dc_graph(grid14, ms), sched, keep_trace=True)
    b = run_dc_bp(build_dc_graph(grid14, ms), sched, keep_trace=True)
    for (ia, za, va), (ib, zb, vb) in zip(a.trace, b.trace):
        assert ia == ib
        assert np.array_equal(za, zb) and np.array_equal(va, vb)


def test_damped_and_synchronous_agree(grid14):
    rng = np.random.default_rng(12)
    for _ in range(6):
        ms = random_dc_measurements(grid14, rng, redundancy=3.0)
        sync = run_dc_bp(build_dc_graph(grid14, ms), ScheduleConfig(tol=1e-13))
        damped = run_dc_bp(build_dc_graph(grid14, ms),
                           ScheduleConfig(mode="randomized_damping", p=0.6,
                                          alpha1=0.5, seed=1, tol=1e-13))
        if sync.converged and damped.converged:
            assert np.max(np.abs(sync.means - damped.means)) < 1e-8


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(mode="bogus")
    with pytest.raises(ValueError):
        ScheduleConfig(mode="randomized_damping", alpha1=1.0)
    with pytest.raises(ValueError):
        ScheduleConfig(tol=0.0)


def test_random_graphs_converged_runs_match_wls():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(10):
        grid = random_small_grid(rng)
        ms = random_dc_measurements(grid, rng, redundancy=2.5)
        res = run_dc_bp(build_dc_graph(grid, ms),
                        ScheduleConfig(max_iter=5000, tol=1e-13))
        if not res.converged:
            continue
        try:
            wls = dc_wls_estimate(grid, ms)
        except Exception:
            continue
        assert np.max(np.abs(res.means[1:] - wls.state.theta[1:])) < 1e-7
        checked += 1
    assert checked >= 4
