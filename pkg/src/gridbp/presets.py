"""Bundled grids, measurement configurations, and streaming scenarios.

These encode the experiment setups exercised by the acceptance suite and the
command line: the 3-bus worked example, the IEEE 14-bus streaming test cases,
and the Monte-Carlo configurations for the 14- and 30-bus networks.
"""

from __future__ import annotations

import math

import numpy as np

from . import load_case
from .grid import Grid
from .measurements import (Measurement, MeasurementSet, P_FLOW, P_INJ, Q_FLOW,
                           Q_INJ, V_ANGLE, V_MAG, eval_h, pmu_voltage_pair)
from .powerflow import InjectionSpec, solve_power_flow
from .realtime import (MeasurementEvent, PoissonStream, Scenario,
                       TruthSegment, pseudo_catalogue)
from .state import StateVector

# active-power-flow deliveries, one per second, walking outward from the
# reference bus; each pins the next voltage angle
STREAM_SCHEDULE = [(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (4, 7), (7, 8),
                   (7, 9), (9, 10), (10, 11), (6, 12), (12, 13), (13, 14)]


def demo3bus_measurements() -> MeasurementSet:
    """The worked 3-bus estimation example's measurement set."""
    return MeasurementSet([
        Measurement(P_FLOW, 1.795, 1e-2, branch=(1, 2)),
        Measurement(P_INJ, 1.966, 1e-2, bus=3),
        Measurement(V_ANGLE, -0.066, 1e-6, bus=2),
    ])


def sixty_one_devices(grid: Grid) -> list[tuple[str, object]]:
    """Fixed 61-device metering plan for the 14-bus network: P/Q flows on
    every branch (from side), voltage magnitude everywhere, and a handful of
    injections."""
    plan = [(kind, (br.i, br.j)) for br in grid.branches
            for kind in (P_FLOW, Q_FLOW)]
    plan += [(V_MAG, b) for b in range(1, grid.n_bus + 1)]
    plan += [(P_INJ, b) for b in (2, 4, 9, 13)]
    plan += [(Q_INJ, b) for b in (3, 6, 10)]
    return plan


def measure_plan(grid: Grid, plan, solution: StateVector, variance: float,
                 seed: int | None = None) -> MeasurementSet:
    """Instantiate a (kind, location) plan with values drawn at ``solution``."""
    rng = np.random.default_rng(seed) if seed is not None else None
    items = []
    for kind, loc in plan:
        kw = dict(branch=tuple(loc)) if isinstance(loc, (tuple, list)) else dict(bus=loc)
        probe = Measurement(kind, 0.0, variance, **kw)
        z = eval_h(probe, solution, grid, "ac")
        if rng is not None:
            z += rng.normal(0.0, math.sqrt(variance))
        items.append(Measurement(kind, z, variance, **kw))
    return MeasurementSet(items)


def legacy_with_pmus(grid: Grid, solution: StateVector, redundancy: float,
                     n_pmus: int, seed: int,
                     legacy_variance: float = 1e-4,
                     pmu_variance: float = 1e-10) -> MeasurementSet:
    """Random legacy set at the given redundancy plus voltage-phasor pairs at
    randomly chosen buses."""
    from .measurements import MeasurementPlan, generate_measurements
    plan = MeasurementPlan(model="ac",
                           kinds=(P_FLOW, Q_FLOW, P_INJ, Q_INJ, V_MAG),
                           redundancy=redundancy,
                           default_variance=legacy_variance)
    legacy = generate_measurements(grid, solution, plan, seed=seed)
    rng = np.random.default_rng(seed + 5_000_003)
    buses = rng.choice(np.arange(1, grid.n_bus + 1), size=n_pmus, replace=False)
    pmus = []
    for bus in buses:
        pmus += pmu_voltage_pair(grid, solution, int(bus), pmu_variance, rng)
    return MeasurementSet(list(legacy) + pmus)


def _mw_variance(v_mw: float, base_mva: float) -> float:
    return v_mw / base_mva**2


def testcase1(grid: Grid | None = None) -> Scenario:
    """Thirteen exact flow deliveries at one-second spacing, variances pinned
    at the fresh level forever; pseudo values everywhere else."""
    grid = grid or load_case("case14")
    catalogue = pseudo_catalogue(grid, [(P_FLOW, br) for br in STREAM_SCHEDULE])
    v_rt = _mw_variance(1e-12, grid.base_mva)
    events = [MeasurementEvent(float(k + 1), k, v_rt)
              for k in range(len(STREAM_SCHEDULE))]
    return Scenario(grid, catalogue, duration=14.0, events=events,
                    sample_dt=0.1)


def testcase2(grid: Grid | None = None,
              v_rt_mw: float = 1e-2) -> Scenario:
    """A single flow delivery on branch 1-2 at t=1 s; used to observe how the
    influence propagates through the network over iterations."""
    grid = grid or load_case("case14")
    catalogue = pseudo_catalogue(grid, [(P_FLOW, br) for br in STREAM_SCHEDULE])
    v_rt = _mw_variance(v_rt_mw, grid.base_mva)
    return Scenario(grid, catalogue, duration=2.0,
                    events=[MeasurementEvent(1.0, 0, v_rt)],
                    sample_dt=0.001)


def testcase3(grid: Grid | None = None, seed: int = 0) -> Scenario:
    """Poisson-arriving flow/injection refreshes with aging, switching to
    low-variance angle deliveries after 250 s, over three operating points."""
    grid = grid or load_case("case14")
    entries = [(P_FLOW, br) for br in STREAM_SCHEDULE]
    entries += [(P_INJ, b) for b in range(1, grid.n_bus + 1)]
    angle_base = len(entries)
    entries += [(V_ANGLE, b) for b in range(1, grid.n_bus + 1)
                if b != grid.slack_bus]
    catalogue = pseudo_catalogue(grid, entries)
    base = InjectionSpec.from_case(grid)
    truth = [TruthSegment(0.0, base),
             TruthSegment(100.0, base.scaled(0.6)),
             TruthSegment(200.0, base.scaled(1.3))]
    power_idx = tuple(range(angle_base))
    angle_idx = tuple(range(angle_base, len(entries)))
    streams = [PoissonStream(power_idx, rate=0.05,
                             v_rt=_mw_variance(1e2, grid.base_mva),
                             staleness=1e3, seed=seed)]
    # angle deliveries only exist in the final interval; emulate by explicit
    # events drawn here so the pre-250 s phase stays power-only
    events = []
    rng = np.random.default_rng(seed + 17)
    deg2rad2 = (math.pi / 180.0) ** 2
    for k, index in enumerate(angle_idx):
        t = 250.0 + rng.exponential(1.0 / 0.5)
        while t < 300.0:
            events.append(MeasurementEvent(t, index, 1e-6 * deg2rad2))
            t += rng.exponential(1.0 / 0.5)
    return Scenario(grid, catalogue, duration=300.0, events=events,
                    streams=streams, truth=truth, sample_dt=0.5)
