"""Factor graph construction and the canonical edge index."""

import numpy as np
import pytest

from gridbp import Measurement, MeasurementSet, build_dc_graph, build_gn_graph
from gridbp.factorgraph import DIRECT, INDIRECT, SLACK_NODE, VIRTUAL
from gridbp.measurements import eval_jacobian_row
from gridbp.state import StateVector

from conftest import make_measurements


def test_demo_graph_layout(grid3, demo_measurements):
    graph = build_dc_graph(grid3, demo_measurements)
    kinds = {}
    for f in graph.factors:
        kinds.setdefault(f.kind, []).append(f)
    assert len(kinds[INDIRECT]) == 2
    degrees = sorted(len(f.variables) for f in kinds[INDIRECT])
    assert degrees == [2, 3]
    assert len(kinds[DIRECT]) == 1 and kinds[DIRECT][0].variables == (1,)
    assert len(kinds[SLACK_NODE]) == 1 and kinds[SLACK_NODE][0].variables == (0,)
    assert len(kinds[VIRTUAL]) == 1 and kinds[VIRTUAL][0].variables == (2,)
    assert graph.b == 5 and graph.m == 2


def test_empty_measurement_set(grid3):
    graph = build_dc_graph(grid3, MeasurementSet([]))
    assert graph.b == 0
    kinds = [f.kind for f in graph.factors]
    assert kinds.count(SLACK_NODE) == 1
    assert kinds.count(VIRTUAL) == 2


def test_local_factor_limits(grid3, demo_measurements):
    graph = build_dc_graph(grid3, demo_measurements)
    slack = next(f for f in graph.factors if f.kind == SLACK_NODE)
    virtual = next(f for f in graph.factors if f.kind == VIRTUAL)
    assert slack.v == 1e-60 and virtual.v == 1e60 and virtual.z == 0.0


def test_virtual_prior_override(grid3, demo_measurements):
    graph = build_dc_graph(grid3, demo_measurements,
                           virtual_priors={2: (0.5, 10.0)})
    virtual = next(f for f in graph.factors if f.kind == VIRTUAL)
    assert (virtual.z, virtual.v) == (0.5, 10.0)


def test_gn_graph_layout(grid3):
    ms = MeasurementSet([
        Measurement("v_mag", 1.0, 1e-4, bus=1),
        Measurement("v_mag", 1.0, 1e-4, bus=2),
        Measurement("p_flow", 1.0, 1e-4, branch=(1, 2)),
        Measurement("p_inj", 1.0, 1e-4, bus=3),
    ])
    graph = build_gn_graph(grid3, ms)
    assert len(graph.variables) == 6
    direct_vars = sorted(f.variables[0] for f in graph.factors
                         if f.kind == DIRECT)
    assert direct_vars == [3, 4]          # vm at buses 1, 2
    slack = next(f for f in graph.factors if f.kind == SLACK_NODE)
    assert slack.variables == (0,) and slack.z == 0.0
    virtual_vars = sorted(f.variables[0] for f in graph.factors
                          if f.kind == VIRTUAL)
    assert virtual_vars == [1, 2, 5]      # angles at 2, 3; vm at 3


def test_gn_graph_no_virtual_when_fully_measured(grid3):
    ms = MeasurementSet(
        [Measurement("v_mag", 1.0, 1e-4, bus=b) for b in (1, 2, 3)]
        + [Measurement("v_angle", 0.0, 1e-4, bus=b) for b in (1, 2, 3)])
    graph = build_gn_graph(grid3, ms)
    assert not [f for f in graph.factors if f.kind == VIRTUAL]


def test_gn_injection_degree(grid14):
    ms = MeasurementSet([Measurement("p_inj", 0.0, 1e-4, bus=b)
                         for b in range(1, 15)])
    graph = build_gn_graph(grid14, ms)
    assert len(graph.variables) == 28
    for f in graph.indirect_factors:
        bus = ms[f.measurement].bus
        arity = 1 + len(grid14.neighbors(bus))
        assert len(f.variables) == 2 * arity


def test_bipartite_and_edge_index(grid14, truth14_dc):
    ms = make_measurements(
        grid14, [("p_flow", (1, 2)), ("p_inj", 4), ("v_angle", 9)],
        truth14_dc, 1e-4, model="dc")
    graph = build_dc_graph(grid14, ms)
    seen = set()
    for k, (f, v) in enumerate(graph.edges):
        assert graph.edge_index[(f, v)] == k
        assert graph.factors[f].kind == INDIRECT
        seen.add(k)
    assert seen == set(range(graph.b))
    again = build_dc_graph(grid14, ms)
    assert again.edges == graph.edges


def test_sparsity_matches_jacobian(grid14):
    rng = np.random.default_rng(4)
    x = StateVector(rng.uniform(-0.3, 0.3, 14), rng.uniform(0.95, 1.1, 14))
    plan = [("p_flow", (1, 2)), ("q_flow", (2, 3)), ("p_inj", 4),
            ("q_inj", 9), ("i_mag", (9, 10)), ("i_angle", (6, 11))]
    ms = make_measurements(grid14, plan, x, 1e-4)
    graph = build_gn_graph(grid14, ms)
    for f in graph.indirect_factors:
        row = eval_jacobian_row(ms[f.measurement], x, grid14, "ac")
        assert set(f.variables) == set(row)


def test_dot_dump(grid3, demo_measurements):
    dot = build_dc_graph(grid3, demo_measurements).to_dot()
    assert dot.startswith("graph")
    for shape in ("box", "diamond", "invtriangle", "octagon"):
        assert shape in dot
