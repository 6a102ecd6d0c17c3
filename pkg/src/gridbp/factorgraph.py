"""Bipartite factor graph over state variables with four factor-node types.

Indirect factors couple several variables through a measurement function;
direct factors measure one variable; the slack factor pins the reference
angle; virtual factors give otherwise-unmeasured variables an uninformative
prior.  Direct, slack and virtual factors are "local": they send a constant
message and never receive one.

The edge index enumerates indirect-factor edges only (those drive the message
iteration): factors ascending by id, variables ascending within a factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ModelError
from .grid import Grid
from .measurements import (
    DC_KINDS, I_ANGLE, I_MAG, I_MAG_PMU, Measurement, MeasurementSet,
    P_FLOW, P_INJ, Q_FLOW, Q_INJ, V_ANGLE, V_MAG, eval_jacobian_row)
from .state import StateVector

INDIRECT, DIRECT, SLACK_NODE, VIRTUAL = "indirect", "direct", "slack", "virtual"
LOCAL_KINDS = (DIRECT, SLACK_NODE, VIRTUAL)

SLACK_VARIANCE = 1e-60
VIRTUAL_VARIANCE = 1e60


@dataclass(frozen=True)
class VariableNode:
    id: int
    role: str         # "theta" or "vm"
    bus: int
    factors: tuple[int, ...] = ()


@dataclass(frozen=True)
class FactorNode:
    id: int
    kind: str
    variables: tuple[int, ...]
    z: float = 0.0
    v: float = 1.0
    measurement: int | None = None       # index into the measurement set
    coeffs: tuple[float, ...] | None = None


class FactorGraph:
    """Immutable graph structure plus the canonical indirect-edge index."""

    def __init__(self, variables: Sequence[VariableNode],
                 factors: Sequence[FactorNode], model: str,
                 grid: Grid, measurements: MeasurementSet):
        self.model = model
        self.grid = grid
        self.measurements = measurements
        self.factors = tuple(factors)
        # attach incident factor lists to variables
        incident: dict[int, list[int]] = {v.id: [] for v in variables}
        for f in self.factors:
            for var in f.variables:
                incident[var].append(f.id)
        self.variables = tuple(
            VariableNode(v.id, v.role, v.bus, tuple(incident[v.id]))
            for v in variables)
        self.indirect_factors = tuple(f for f in self.factors if f.kind == INDIRECT)
        self.local_factors = tuple(f for f in self.factors if f.kind != INDIRECT)
        edges = []
        for f in self.indirect_factors:
            if tuple(sorted(f.variables)) != f.variables:
                raise ValueError("factor variables must be ascending")
            for var in f.variables:
                edges.append((f.id, var))
        self.edges = tuple(edges)
        self.edge_index = {e: k for k, e in enumerate(edges)}
        self.b = len(edges)
        self.m = len(self.indirect_factors)
        self._check()

    def _check(self):
        for f in self.local_factors:
            if len(f.variables) != 1:
                raise ValueError(f"local factor {f.id} must be singly connected")
        for v in self.variables:
            kinds = {self.factors[f].kind for f in v.factors}
            if not (kinds & set(LOCAL_KINDS)):
                raise ValueError(f"variable {v.id} has no local factor")

    def local_factors_of(self, var_id: int) -> list[FactorNode]:
        return [self.factors[f] for f in self.variables[var_id].factors
                if self.factors[f].kind != INDIRECT]

    def to_dot(self) -> str:
        """Graphviz dump; factor shape encodes its kind."""
        shape = {INDIRECT: "box", DIRECT: "diamond",
                 SLACK_NODE: "invtriangle", VIRTUAL: "octagon"}
        lines = ["graph factorgraph {"]
        for v in self.variables:
            lines.append(f'  x{v.id} [label="{v.role}{v.bus}" shape=circle];')
        for f in self.factors:
            label = f.kind if f.measurement is None else \
                self.measurements[f.measurement].describe()
            lines.append(f'  f{f.id} [label="{label}" shape={shape[f.kind]}];')
            for var in f.variables:
                lines.append(f"  f{f.id} -- x{var};")
        lines.append("}")
        return "\n".join(lines)


def _finish(variables, factors, grid, measurements, model,
            directly_anchored: set[int], virtual_priors: dict | None):
    """Append slack/virtual factors so every variable has a local factor."""
    virtual_priors = virtual_priors or {}
    next_id = len(factors)
    slack_var = grid.slack_bus - 1  # theta variable of the slack bus
    factors.append(FactorNode(next_id, SLACK_NODE, (slack_var,),
                              z=0.0, v=SLACK_VARIANCE))
    next_id += 1
    for v in variables:
        if v.id == slack_var or v.id in directly_anchored:
            continue
        mean, var = virtual_priors.get(v.id, (0.0, VIRTUAL_VARIANCE))
        factors.append(FactorNode(next_id, VIRTUAL, (v.id,), z=mean, v=var))
        next_id += 1
    return FactorGraph(variables, factors, model, grid, measurements)


def build_dc_graph(grid: Grid, measurements: MeasurementSet,
                   virtual_priors: dict | None = None,
                   slack_value: float = 0.0) -> FactorGraph:
    """Angle-only graph: flow/injection measurements become indirect factors
    with constant coefficient rows, angle measurements become direct factors."""
    n = grid.n_bus
    variables = [VariableNode(k, "theta", k + 1) for k in range(n)]
    factors: list[FactorNode] = []
    anchored: set[int] = set()
    x_flat = StateVector.flat(n)
    for idx, m in enumerate(measurements):
        if m.kind not in DC_KINDS:
            raise ModelError(f"{m.kind} is not a DC-model measurement kind")
        if m.kind == V_ANGLE:
            var = m.bus - 1
            factors.append(FactorNode(len(factors), DIRECT, (var,),
                                      z=m.value, v=m.variance, measurement=idx))
            anchored.add(var)
            continue
        row = eval_jacobian_row(m, x_flat, grid, "dc")
        variables_of = tuple(sorted(row))
        coeffs = tuple(row[c] for c in variables_of)
        factors.append(FactorNode(len(factors), INDIRECT, variables_of,
                                  z=m.value, v=m.variance, measurement=idx,
                                  coeffs=coeffs))
    graph = _finish(variables, factors, grid, measurements, "dc",
                    anchored, virtual_priors)
    if slack_value != 0.0:
        graph = _override_slack(graph, slack_value)
    return graph


def _override_slack(graph: FactorGraph, slack_value: float) -> FactorGraph:
    factors = [FactorNode(f.id, f.kind, f.variables, slack_value, f.v,
                          f.measurement, f.coeffs)
               if f.kind == SLACK_NODE else f for f in graph.factors]
    return FactorGraph(graph.variables, factors, graph.model, graph.grid,
                       graph.measurements)


_GN_DIRECT = {V_MAG, V_ANGLE}
_GN_INDIRECT = {P_FLOW, Q_FLOW, P_INJ, Q_INJ, I_MAG, I_MAG_PMU, I_ANGLE}


def gn_variable_support(m: Measurement, grid: Grid) -> tuple[int, ...]:
    """Stacked variable indices a measurement function depends on."""
    n = grid.n_bus
    if m.kind in (P_FLOW, Q_FLOW, I_MAG, I_MAG_PMU, I_ANGLE):
        i, j = m.branch
        return tuple(sorted((i - 1, j - 1, n + i - 1, n + j - 1)))
    if m.kind in (P_INJ, Q_INJ):
        buses = [m.bus] + grid.neighbors(m.bus)
        return tuple(sorted([b - 1 for b in buses] + [n + b - 1 for b in buses]))
    raise ModelError(f"{m.kind} is not an indirect measurement kind")


def build_gn_graph(grid: Grid, measurements: MeasurementSet,
                   virtual_priors: dict | None = None) -> FactorGraph:
    """Increment-space graph over all 2N variables.

    Indirect factors get their structure (variable support) here; their
    residuals and Jacobian coefficients are filled per linearization point by
    the estimator.  Voltage magnitude/angle measurements become direct
    factors whose residual is likewise refreshed per outer iteration.
    """
    n = grid.n_bus
    variables = ([VariableNode(k, "theta", k + 1) for k in range(n)]
                 + [VariableNode(n + k, "vm", k + 1) for k in range(n)])
    factors: list[FactorNode] = []
    anchored: set[int] = set()
    for idx, m in enumerate(measurements):
        if m.kind in _GN_DIRECT:
            var = (m.bus - 1) if m.kind == V_ANGLE else (n + m.bus - 1)
            factors.append(FactorNode(len(factors), DIRECT, (var,),
                                      z=m.value, v=m.variance, measurement=idx))
            anchored.add(var)
        elif m.kind in _GN_INDIRECT:
            support = gn_variable_support(m, grid)
            factors.append(FactorNode(len(factors), INDIRECT, support,
                                      z=m.value, v=m.variance, measurement=idx))
        else:
            raise ModelError(f"{m.kind} is not supported by the increment graph")
    return _finish(variables, factors, grid, measurements, "gn",
                   anchored, virtual_priors)
