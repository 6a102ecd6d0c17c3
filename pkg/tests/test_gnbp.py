"""Relinearized message-passing estimator and its bad-data test."""

import math

import numpy as np
import pytest

from gridbp import (Measurement, MeasurementSet, ScheduleConfig, build_dc_graph,
                    gauss_newton, run_dc_bp, solve_linear_wls, wrss)
from gridbp.engine import CompiledGraph
from gridbp.errors import ConvergenceError
from gridbp.gnbp import (GnConfig, bp_bdt, calibrate_kappa, flat_perturbed_start,
                         inner_bp_solve, linearize, run_bdt_cycles, run_gn_bp,
                         _with_unit_coeffs)
from gridbp.factorgraph import build_gn_graph
from gridbp.measurements import eval_h, stacked_jacobian
from gridbp.presets import measure_plan, sixty_one_devices
from gridbp.state import StateVector

from conftest import make_measurements


@pytest.fixture(scope="module")
def devices61(grid14, truth14_ac):
    return measure_plan(grid14, sixty_one_devices(grid14), truth14_ac, 1e-4,
                        seed=801)


def test_linear_model_single_outer(grid3, demo_measurements):
    res = run_gn_bp(grid3, demo_measurements,
                    GnConfig(nu_max=4, damping=None, inner_tol=(1e-12,),
                             outer_tol=1e-11),
                    model="dc")
    dc = run_dc_bp(build_dc_graph(grid3, demo_measurements),
                   ScheduleConfig(tol=1e-14))
    assert res.iterations <= 2   # the solving step plus a vanishing check step
    assert np.max(np.abs(res.state.theta - dc.means)) < 1e-10


def test_noise_free_warm_start(grid14, truth14_ac):
    ms = measure_plan(grid14, sixty_one_devices(grid14), truth14_ac, 1e-4)
    res = run_gn_bp(grid14, ms, GnConfig(nu_max=5, outer_tol=1e-9), x0=truth14_ac)
    assert res.converged and res.iterations == 1
    assert res.mad_history[0] < 1e-9


def test_matches_centralized_iteration(grid14, truth14_ac, devices61):
    ref = gauss_newton(grid14, devices61, truth14_ac, max_iter=12, tol=1e-12)
    res = run_gn_bp(grid14, devices61, GnConfig(nu_max=12, outer_tol=1e-11),
                    x0=truth14_ac)
    assert res.converged
    assert np.max(np.abs(res.state.stacked() - ref.state.stacked())) < 1e-8
    assert res.wrss / ref.wrss == pytest.approx(1.0, abs=1e-6)


def test_inner_solution_matches_dense_wls(grid14, truth14_ac, devices61):
    graph = build_gn_graph(grid14, devices61)
    base = CompiledGraph.from_factor_graph(_with_unit_coeffs(graph))
    x = flat_perturbed_start(grid14, seed=4)
    system = linearize(graph, base, x)
    inner = inner_bp_solve(system, 1e-12, 20000,
                           np.random.default_rng(0).random(base.b) < 0.8, 0.4)
    assert inner.converged
    jac = stacked_jacobian(list(devices61), x, grid14, "ac")
    z = np.array([m.value for m in devices61])
    v = np.array([m.variance for m in devices61])
    h = np.array([eval_h(m, x, grid14, "ac") for m in devices61])
    dense = solve_linear_wls(jac, v, z - h, grid14.slack_bus - 1)
    keep = np.arange(28) != (grid14.slack_bus - 1)
    assert np.max(np.abs(inner.delta[keep] - dense[keep])) < 1e-8
    # normal-equations residual at the message fixed point
    resid = (jac * (1.0 / v)[:, None]).T @ (z - h - jac @ inner.delta)
    assert np.max(np.abs(resid[keep])) < 1e-6


def test_inner_on_linear_increments(grid3, demo_measurements):
    graph = build_dc_graph(grid3, demo_measurements)
    base = CompiledGraph.from_factor_graph(graph)
    system = linearize(graph, base, StateVector.flat(3), model="dc")
    inner = inner_bp_solve(system, 1e-13, 5000)
    assert inner.delta == pytest.approx([0.0, -0.0663, -0.0076], abs=1e-4)


def test_single_direct_equivalent(grid3):
    ms = MeasurementSet([Measurement("v_mag", 1.07, 1e-4, bus=b)
                         for b in (1, 2, 3)]
                        + [Measurement("v_angle", 0.02 * b, 1e-4, bus=b)
                           for b in (2, 3)])
    graph = build_gn_graph(grid3, ms)
    base = CompiledGraph.from_factor_graph(_with_unit_coeffs(graph))
    x = StateVector.flat(3)
    inner = inner_bp_solve(linearize(graph, base, x), 1e-12, 100)
    assert inner.delta[4] == pytest.approx(0.07)   # vm2 residual
    assert inner.delta[1] == pytest.approx(0.04)   # theta2 residual


def test_flat_perturbed_start_is_seeded(grid14):
    a = flat_perturbed_start(grid14, seed=9)
    b = flat_perturbed_start(grid14, seed=9)
    c = flat_perturbed_start(grid14, seed=10)
    assert np.array_equal(a.stacked(), b.stacked())
    assert not np.array_equal(a.stacked(), c.stacked())
    assert a.theta[grid14.slack_bus - 1] == 0.0
    assert np.max(np.abs(a.theta)) <= 0.01 and np.max(np.abs(a.vm - 1)) <= 0.001


def test_flat_perturbed_run(grid14, truth14_ac, devices61):
    res = run_gn_bp(grid14, devices61,
                    GnConfig(nu_max=12, init="flat_perturbed", seed=3,
                             outer_tol=1e-10))
    ref = gauss_newton(grid14, devices61, truth14_ac, max_iter=12, tol=1e-12)
    assert res.converged
    assert res.wrss / ref.wrss == pytest.approx(1.0, abs=1e-6)


def test_zero_coefficient_edges_skipped(grid3):
    # lossless branches at a flat point: flows carry no magnitude information
    truth = StateVector([0.0, -0.02, -0.01], np.ones(3))
    plan = [("p_flow", (1, 2)), ("p_flow", (1, 3)), ("p_flow", (2, 3)),
            ("v_mag", 1), ("v_mag", 2), ("v_mag", 3)]
    ms = make_measurements(grid3, plan, truth, 1e-6)
    res = run_gn_bp(grid3, ms, GnConfig(nu_max=6, damping=None,
                                        outer_tol=1e-10), x0=StateVector.flat(3))
    ref = gauss_newton(grid3, ms, StateVector.flat(3), max_iter=8, tol=1e-12)
    assert res.converged
    assert np.max(np.abs(res.state.stacked() - ref.state.stacked())) < 1e-7


def test_vanishing_current_deactivates_factor(grid3):
    truth = StateVector.flat(3)  # no flows anywhere
    ms = make_measurements(grid3, [("i_mag", (1, 2)), ("v_mag", 1),
                                   ("v_mag", 2), ("v_mag", 3)], truth, 1e-6)
    graph = build_gn_graph(grid3, ms)
    base = CompiledGraph.from_factor_graph(_with_unit_coeffs(graph))
    system = linearize(graph, base, truth)
    assert system.deactivated == [0]
    assert not system.cg.active[:4].any()


def test_inner_nonconvergence_reported(grid14, truth14_ac, devices61):
    with pytest.raises(ConvergenceError, match="outer iteration"):
        run_gn_bp(grid14, devices61,
                  GnConfig(nu_max=2, inner_max_iter=3, inner_tol=(1e-12,),
                           damping=None), x0=truth14_ac)


# -- bad data ---------------------------------------------------------------


def test_bdt_clean_statistics_small(grid14, truth14_ac, devices61):
    res = run_gn_bp(grid14, devices61, GnConfig(nu_max=8, outer_tol=1e-9),
                    x0=truth14_ac)
    report = bp_bdt(res, math.inf)
    assert not report.suspect
    assert report.largest < 50.0   # noise-scale statistics


def test_bdt_identifies_corruption(grid14, truth14_ac, devices61):
    bad = 5   # an active-flow measurement
    corrupted = devices61.replace_value(
        bad, devices61[bad].value + 20 * math.sqrt(devices61[bad].variance))
    res = run_gn_bp(grid14, corrupted, GnConfig(nu_max=8, outer_tol=1e-9),
                    x0=truth14_ac)
    report = bp_bdt(res, 100.0)
    assert report.suspect and report.argmax == bad


def test_bdt_statistic_order_invariant(grid14, truth14_ac):
    ms = measure_plan(grid14, sixty_one_devices(grid14), truth14_ac, 1e-4,
                      seed=55)
    perm = list(range(len(ms)))
    np.random.default_rng(1).shuffle(perm)
    shuffled = MeasurementSet([ms[k] for k in perm])
    cfg = GnConfig(nu_max=8, outer_tol=1e-9)
    stats_a = bp_bdt(run_gn_bp(grid14, ms, cfg, x0=truth14_ac), math.inf).statistics
    stats_b = bp_bdt(run_gn_bp(grid14, shuffled, cfg, x0=truth14_ac),
                     math.inf).statistics
    for new_idx, old_idx in enumerate(perm):
        assert stats_b[new_idx] == pytest.approx(stats_a[old_idx], rel=1e-6)


def test_bdt_removal_cycle(grid14, truth14_ac, devices61):
    bad = 7
    corrupted = devices61.replace_value(
        bad, devices61[bad].value + 25 * math.sqrt(devices61[bad].variance))
    cfg = GnConfig(nu_max=8, outer_tol=1e-9)
    result, report = run_bdt_cycles(grid14, corrupted, cfg, kappa=200.0)
    assert report.removal_history == [bad]
    assert not report.suspect


def test_kappa_calibration(grid14, truth14_ac):
    sets = [measure_plan(grid14, sixty_one_devices(grid14), truth14_ac, 1e-4,
                         seed=s) for s in (1, 2)]
    cfg = GnConfig(nu_max=8, outer_tol=1e-9)
    kappa = calibrate_kappa(grid14, sets, cfg)
    worst = max(bp_bdt(run_gn_bp(grid14, s, cfg), math.inf).largest
                for s in sets)
    assert kappa == pytest.approx(3.0 * worst)
