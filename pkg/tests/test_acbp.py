"""Nonlinear message passing: mean equations, root selection, full runs."""

import math

import numpy as np
import pytest

from gridbp import Measurement, MeasurementSet, ScheduleConfig, build_dc_graph, \
    gauss_newton, run_dc_bp, solve_power_flow, wrss
from gridbp.acbp import (LINEAR, QUADRATIC, SINE_QUADRATIC, MeanEquation,
                         PriorState, build_mean_equation, run_ac_bp,
                         sine_equation, solve_mean, variance_fv)
from gridbp.errors import ModelError
from gridbp.measurements import eval_h
from gridbp.presets import measure_plan, sixty_one_devices
from gridbp.state import StateVector

from conftest import make_measurements


def _incoming_at(grid, m, state):
    buses = list(m.branch) if m.branch else [m.bus] + grid.neighbors(m.bus)
    inc = {}
    for b in buses:
        inc[("theta", b)] = state.theta[b - 1]
        inc[("vm", b)] = state.vm[b - 1]
    return inc


def test_vmag_equation(grid14):
    m = Measurement("v_mag", 1.04, 1e-4, bus=5)
    eq = build_mean_equation(m, grid14, ("vm", 5), {})
    assert eq.form == LINEAR and (eq.a, eq.b) == (1.0, -1.04)
    assert solve_mean(eq, 1.0, 1.0) == pytest.approx(1.04)


def test_flow_equation_forms(grid14):
    rng = np.random.default_rng(2)
    x = StateVector(rng.uniform(-0.2, 0.2, 14), rng.uniform(0.95, 1.08, 14))
    br = grid14.branches[2]
    m0 = Measurement("p_flow", 0.0, 1e-4, branch=(br.i, br.j))
    m = Measurement("p_flow", eval_h(m0, x, grid14, "ac"), 1e-4,
                    branch=(br.i, br.j))
    inc = _incoming_at(grid14, m, x)
    assert build_mean_equation(m, grid14, ("vm", br.i), inc).form == QUADRATIC
    assert build_mean_equation(m, grid14, ("vm", br.j), inc).form == LINEAR
    assert build_mean_equation(m, grid14, ("theta", br.i), inc).form == \
        SINE_QUADRATIC


def test_truth_recovery_all_kinds_and_orientations(grid14):
    rng = np.random.default_rng(3)
    x = StateVector(rng.uniform(-0.3, 0.3, 14), rng.uniform(0.95, 1.1, 14))
    fails = []
    for kind in ("p_flow", "q_flow"):
        for br in grid14.branches:
            for (i, j) in ((br.i, br.j), (br.j, br.i)):
                m0 = Measurement(kind, 0.0, 1e-6, branch=(i, j))
                m = Measurement(kind, eval_h(m0, x, grid14, "ac"), 1e-6,
                                branch=(i, j))
                inc = _incoming_at(grid14, m, x)
                for target in (("theta", i), ("theta", j),
                               ("vm", i), ("vm", j)):
                    want = x.theta[target[1] - 1] if target[0] == "theta" \
                        else x.vm[target[1] - 1]
                    eq = build_mean_equation(m, grid14, target, inc)
                    got = solve_mean(eq, want, want)
                    if abs(got - want) > 1e-9:
                        fails.append((kind, (i, j), target))
    for kind in ("p_inj", "q_inj"):
        for bus in range(1, 15):
            m0 = Measurement(kind, 0.0, 1e-6, bus=bus)
            m = Measurement(kind, eval_h(m0, x, grid14, "ac"), 1e-6, bus=bus)
            inc = _incoming_at(grid14, m, x)
            targets = [("theta", bus), ("vm", bus)]
            targets += [(r, k) for k in grid14.neighbors(bus)
                        for r in ("theta", "vm")]
            for target in targets:
                want = x.theta[target[1] - 1] if target[0] == "theta" \
                    else x.vm[target[1] - 1]
                eq = build_mean_equation(m, grid14, target, inc)
                got = solve_mean(eq, want, want)
                if abs(got - want) > 1e-9:
                    fails.append((kind, bus, target))
    assert not fails


def test_solve_mean_rules():
    # negative discriminant falls back to the prior
    eq = MeanEquation(QUADRATIC, 1.0, 0.0, 1.0)
    assert solve_mean(eq, 0.7, 0.1) == 0.7
    # proximity rule
    eq = MeanEquation(QUADRATIC, 1.0, -(1.01 - 3.2), 1.01 * -3.2)
    assert solve_mean(eq, 1.0, 0.0) == pytest.approx(1.01)
    # equidistant roots break to the smaller one
    eq = MeanEquation(QUADRATIC, 1.0, 0.0, -4.0)   # roots +-2, prior 0
    assert solve_mean(eq, 0.0, 0.0) == pytest.approx(-2.0)
    # vanishing linear coefficient falls back to the previous mean
    counters = {}
    assert solve_mean(MeanEquation(LINEAR, 0.0, 1.0), 0.5, 0.123,
                      counters) == 0.123
    assert counters["degenerate_linear"] == 1


def test_sine_form_dc_limit(grid3):
    # lossless branch, flat magnitudes, small angles: the selected root
    # linearizes to the linear-model message mean
    b_series = grid3.branches[0].b     # branch 1-2, x=0.04
    z = 0.3
    theta_j = -0.01
    eq = sine_equation(alpha=grid3.branches[0].g * math.sin(theta_j)
                       + b_series * math.cos(theta_j),
                       beta=grid3.branches[0].g * math.cos(theta_j)
                       - b_series * math.sin(theta_j),
                       gamma=-z)
    got = solve_mean(eq, 0.0, 0.0)
    beta_dc = grid3.branches[0].dc_susceptance
    linear = (z + beta_dc * theta_j) / beta_dc
    assert got == pytest.approx(linear, abs=1e-5)


def test_variance_fv_linear_case(grid3, demo_measurements):
    m = demo_measurements[0]   # active flow 1-2
    point = {("theta", 1): 0.0, ("theta", 2): 0.0,
             ("vm", 1): 1.0, ("vm", 2): 1.0}
    var = variance_fv(m, grid3, ("theta", 1), point,
                      {("theta", 2): 1e-6, ("vm", 1): 0.0, ("vm", 2): 0.0})
    assert var == pytest.approx((1e-2 + 625 * 1e-6) / 625)


def test_variance_fv_vmag(grid14):
    m = Measurement("v_mag", 1.0, 3e-4, bus=2)
    var = variance_fv(m, grid14, ("vm", 2), {("vm", 2): 1.0}, {})
    assert var == pytest.approx(3e-4)


def test_dc_route_matches_linear_algorithm(grid3, demo_measurements):
    dc = run_dc_bp(build_dc_graph(grid3, demo_measurements),
                   ScheduleConfig(tol=1e-14))
    ac = run_ac_bp(grid3, demo_measurements, model="dc", tol=1e-14)
    assert ac.converged
    assert np.array_equal(ac.means, dc.means)
    assert np.array_equal(ac.variances, dc.variances)


def test_unsupported_kind_rejected(grid14):
    ms = MeasurementSet([Measurement("i_mag", 1.0, 1e-4, branch=(1, 2))])
    with pytest.raises(ModelError):
        run_ac_bp(grid14, ms)


def test_noise_free_converges_to_truth(grid14, truth14_ac):
    ms = measure_plan(grid14, sixty_one_devices(grid14), truth14_ac, 1e-4)
    res = run_ac_bp(grid14, ms, max_iter=3000, tol=1e-9)
    assert res.converged
    st = res.state(grid14)
    assert np.max(np.abs(st.stacked() - truth14_ac.stacked())) < 1e-6
    assert (res.variances > 0).all()


def test_regime_split_small(grid14, truth14_ac):
    plan = sixty_one_devices(grid14)
    for variance, check in ((1e-10, lambda r: abs(r - 1) < 0.05),
                            (1e-4, lambda r: r > 1.0)):
        ms = measure_plan(grid14, plan, truth14_ac, variance, seed=500)
        ref = gauss_newton(grid14, ms, truth14_ac, max_iter=12, tol=1e-12)
        res = run_ac_bp(grid14, ms, max_iter=3000, tol=1e-8)
        ratio = wrss(ms, res.state(grid14), grid14, "ac") / ref.wrss
        assert check(ratio), (variance, ratio)


def test_wrss_trace_recorded(grid14, truth14_ac):
    ms = measure_plan(grid14, sixty_one_devices(grid14), truth14_ac, 1e-4,
                      seed=7)
    res = run_ac_bp(grid14, ms, max_iter=400, tol=1e-300, wrss_every=100)
    assert len(res.wrss_trace) >= 4
    iters = [it for it, _ in res.wrss_trace]
    assert iters == sorted(iters)
