"""Message-passing Gauss-Newton estimator and its bad-data test.

An outer loop relinearizes the measurement functions at the current state;
each inner loop runs Gaussian message passing over the state *increments*
(residual means, Jacobian coefficients) and applies the marginal increment
estimates.  Converged inner messages also feed the bad-data statistic
r²/v per factor-to-variable message.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .convergence import (assemble_omega, assemble_omega_damped, edge_system,
                          spectral_radius, variance_fixed_point)
from .engine import CompiledGraph, MessageState, init_state, marginals, \
    run_message_passing
from .errors import ConvergenceError, ObservabilityError
from .factorgraph import (DIRECT, INDIRECT, SLACK_NODE, VIRTUAL, FactorGraph,
                          build_gn_graph)
from .grid import Grid
from .measurements import V_ANGLE, V_MAG, MeasurementSet, eval_h, eval_jacobian_row
from .reference import EstimationResult, mad, wrss
from .state import StateVector


@dataclass(frozen=True)
class GnConfig:
    """Outer/inner loop configuration.

    ``inner_tol`` is consumed one entry per outer iteration; the last entry is
    reused when the outer loop runs longer.  ``damping`` is an optional
    (p, alpha1) pair; the Bernoulli mask is drawn once per run from ``seed``.
    ``init`` picks the start: "warm" (given or truth-adjacent state) or
    "flat_perturbed" (flat profile with a small random perturbation,
    slack angle kept at the reference).
    """

    nu_max: int = 12
    inner_tol: tuple[float, ...] = (1e-2, 1e-4, 1e-6, 1e-8, 1e-10)
    inner_max_iter: int = 6000
    damping: tuple[float, float] | None = (0.8, 0.4)
    init: str = "warm"
    outer_tol: float = 1e-10
    seed: int = 0
    allow_inner_nonconverged: bool = False
    certify: bool = False

    def __post_init__(self):
        if not self.inner_tol or any(e <= 0 for e in self.inner_tol):
            raise ValueError("inner tolerance schedule must be positive")
        if self.init not in ("warm", "flat_perturbed"):
            raise ValueError(f"unknown init {self.init!r}")

    def tol_at(self, nu: int) -> float:
        return self.inner_tol[min(nu, len(self.inner_tol) - 1)]


def flat_perturbed_start(grid: Grid, seed: int) -> StateVector:
    """Flat profile with angle noise U(-0.01, 0.01) rad and magnitude noise
    U(-0.001, 0.001); the slack angle stays at the reference."""
    rng = np.random.default_rng(seed)
    n = grid.n_bus
    theta = rng.uniform(-0.01, 0.01, size=n)
    theta[grid.slack_bus - 1] = 0.0
    vm = 1.0 + rng.uniform(-0.001, 0.001, size=n)
    return StateVector(theta, vm)


@dataclass
class LinearizedSystem:
    """One outer iteration's numbers bound to the shared graph structure."""

    cg: CompiledGraph
    deactivated: list[int] = field(default_factory=list)  # factor ordinals


def linearize(graph: FactorGraph, base: CompiledGraph, x: StateVector,
              model: str = "ac") -> LinearizedSystem:
    """Residuals and Jacobian coefficients of every factor at state ``x``.

    Measurements whose Jacobian row is singular at ``x`` (vanishing current
    magnitudes) are deactivated for this outer iteration by zeroing their
    coefficients.
    """
    grid, ms = graph.grid, graph.measurements
    coeff = np.zeros(base.b)
    fac_z = np.empty(base.m)
    fac_v = base.fac_v.copy()
    deactivated = []
    edge_pos = 0
    for ord_, f in enumerate(graph.indirect_factors):
        m = ms[f.measurement]
        fac_z[ord_] = m.value - eval_h(m, x, grid, model)
        try:
            row = eval_jacobian_row(m, x, grid, model)
        except ObservabilityError:
            row = {}
            deactivated.append(ord_)
        # analytic zeros of the row come back as rounding ghosts; an edge with
        # a ghost coefficient would emit means of size 1/ghost, so drop it
        scale = max((abs(v) for v in row.values()), default=0.0)
        floor = 1e-12 * scale
        for var in f.variables:
            val = row.get(var, 0.0)
            coeff[edge_pos] = val if abs(val) > floor else 0.0
            edge_pos += 1
    local_prec = np.zeros(base.n_var)
    local_wmean = np.zeros(base.n_var)
    for f in graph.local_factors:
        var = f.variables[0]
        if f.kind == DIRECT:
            m = ms[f.measurement]
            if m.kind == V_ANGLE:
                resid = m.value - x.theta[m.bus - 1]
            else:
                resid = m.value - x.vm[m.bus - 1]
            local_prec[var] += 1.0 / m.variance
            local_wmean[var] += resid / m.variance
        else:
            # slack and virtual factors carry a zero (or prior) increment
            local_prec[var] += 1.0 / f.v
            local_wmean[var] += f.z / f.v
    return LinearizedSystem(
        base.with_values(coeff, fac_z, fac_v, local_prec, local_wmean),
        deactivated)


@dataclass
class InnerResult:
    delta: np.ndarray
    delta_var: np.ndarray
    state: MessageState
    iterations: int
    converged: bool
    last_change: float


def inner_bp_solve(system: LinearizedSystem, tol: float, max_iter: int,
                   damp_mask: np.ndarray | None = None,
                   alpha1: float = 0.0) -> InnerResult:
    """Run the increment message passing to a fixed point and read the
    marginal increments."""
    cg = system.cg
    state = init_state(cg)
    stats = run_message_passing(cg, state, max_iter, tol,
                                damp_mask=damp_mask, alpha1=alpha1)
    means, variances = marginals(cg, state)
    return InnerResult(means, variances, state, stats.iterations,
                       stats.converged, stats.last_change)


def run_gn_bp(grid: Grid, measurements: MeasurementSet,
              config: GnConfig | None = None,
              x0: StateVector | None = None,
              model: str = "ac") -> EstimationResult:
    """Full estimator: relinearize, solve increments by message passing,
    update, until the outer MAD drops below ``config.outer_tol``.

    ``model="dc"`` runs the same outer/inner machinery over the angle-only
    linear model (which then terminates after one effective outer step).
    """
    config = config or GnConfig()
    if model == "dc":
        from .factorgraph import build_dc_graph
        graph = build_dc_graph(grid, measurements)
    else:
        graph = build_gn_graph(grid, measurements)
    base = CompiledGraph.from_factor_graph(_with_unit_coeffs(graph))
    if x0 is None:
        if config.init == "flat_perturbed":
            x0 = flat_perturbed_start(grid, config.seed)
        else:
            x0 = StateVector.flat(grid.n_bus)
    x = StateVector(x0.theta.copy(), x0.vm.copy())
    damp_mask = None
    alpha1 = 0.0
    if config.damping is not None:
        p, alpha1 = config.damping
        damp_mask = np.random.default_rng(config.seed).random(base.b) < p

    n = grid.n_bus
    mad_history: list[float] = []
    wrss_history: list[float] = []
    inner_iters: list[int] = []
    rho_per_outer: list[float] = []
    last_inner: InnerResult | None = None
    last_system: LinearizedSystem | None = None
    converged = False
    nu_used = 0
    for nu in range(config.nu_max):
        system = linearize(graph, base, x, model)
        if config.certify:
            rho_per_outer.append(_certify_system(system, damp_mask, alpha1))
        inner = inner_bp_solve(system, config.tol_at(nu), config.inner_max_iter,
                               damp_mask, alpha1)
        if not inner.converged and not config.allow_inner_nonconverged:
            raise ConvergenceError(
                f"inner message passing failed at outer iteration {nu}: "
                f"last mean change {inner.last_change:.3e}")
        if model == "dc":
            x = StateVector(x.theta + inner.delta, x.vm)
        else:
            x = StateVector(x.theta + inner.delta[:n], x.vm + inner.delta[n:])
        mad_history.append(mad(np.zeros_like(inner.delta), inner.delta))
        wrss_history.append(wrss(measurements, x, grid, model))
        inner_iters.append(inner.iterations)
        last_inner, last_system = inner, system
        nu_used = nu + 1
        if mad_history[-1] < config.outer_tol:
            converged = True
            break
    result = EstimationResult(
        x, nu_used, converged, wrss_history[-1] if wrss_history else
        wrss(measurements, x, grid, model), mad_history, method="gn-bp",
        extras={"inner_iterations": inner_iters, "wrss_history": wrss_history})
    if config.certify:
        result.extras["rho_per_outer"] = rho_per_outer
        result.extras["rho_max"] = max(rho_per_outer) if rho_per_outer else 0.0
    result.extras["_inner"] = last_inner
    result.extras["_system"] = last_system
    result.extras["_graph"] = graph
    return result


def _with_unit_coeffs(graph: FactorGraph) -> FactorGraph:
    """Structure-only clone whose indirect factors carry placeholder ones."""
    from .factorgraph import FactorNode
    factors = [FactorNode(f.id, f.kind, f.variables, f.z, f.v, f.measurement,
                          tuple(1.0 for _ in f.variables)
                          if f.kind == INDIRECT and f.coeffs is None
                          else f.coeffs)
               for f in graph.factors]
    return FactorGraph(graph.variables, factors, graph.model, graph.grid,
                       graph.measurements)


def _certify_system(system: LinearizedSystem, damp_mask, alpha1) -> float:
    sys = edge_system(system.cg)
    v_hat = variance_fixed_point(sys)
    omega = assemble_omega(sys, v_hat)
    if damp_mask is None:
        return spectral_radius(omega)
    mask = np.asarray(damp_mask, dtype=bool)[system.cg.active]
    return spectral_radius(assemble_omega_damped(omega, mask, alpha1))


# -- bad data ----------------------------------------------------------------


@dataclass
class BadDataReport:
    """Per-measurement bad-data statistics from the final inner messages."""

    statistics: dict[int, float]      # measurement index -> max r²/v component
    argmax: int | None
    largest: float
    threshold: float
    suspect: bool
    removal_history: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "threshold": self.threshold,
            "suspect": bool(self.suspect),
            "argmax_measurement": self.argmax,
            "largest_statistic": self.largest,
            "statistics": {str(k): v for k, v in self.statistics.items()},
            "removal_history": self.removal_history,
        }, indent=2, sort_keys=True)


def bp_bdt(result: EstimationResult, kappa: float) -> BadDataReport:
    """Bad-data test over the converged run's factor-to-variable messages.

    Each measurement factor contributes max over its outgoing edges of
    (mean²/variance); the largest statistic across factors is compared
    against the threshold.
    """
    inner: InnerResult = result.extras["_inner"]
    system: LinearizedSystem = result.extras["_system"]
    graph: FactorGraph = result.extras["_graph"]
    cg = system.cg
    stats: dict[int, float] = {}
    # indirect factors: use the final message buffers edge by edge
    for e in range(cg.b):
        if not cg.active[e]:
            continue
        f = graph.indirect_factors[cg.edge_fac[e]]
        val = inner.state.z_fv[e] ** 2 / inner.state.v_fv[e]
        key = f.measurement
        stats[key] = max(stats.get(key, 0.0), val)
    # direct factors send a constant (residual, variance) message
    ms = graph.measurements
    x = result.state
    for f in graph.local_factors:
        if f.kind != DIRECT:
            continue
        m = ms[f.measurement]
        resid = m.value - (x.theta[m.bus - 1] if m.kind == V_ANGLE
                           else x.vm[m.bus - 1])
        stats[f.measurement] = resid**2 / m.variance
    if stats:
        argmax = max(stats, key=stats.get)
        largest = stats[argmax]
    else:
        argmax, largest = None, 0.0
    return BadDataReport(stats, argmax, largest, kappa, largest > kappa)


def run_bdt_cycles(grid: Grid, measurements: MeasurementSet,
                   config: GnConfig, kappa: float,
                   max_cycles: int = 5) -> tuple[EstimationResult, BadDataReport]:
    """Identify-and-remove loop: rerun the estimator from scratch after each
    suspected measurement until the statistic clears the threshold."""
    removed: list[int] = []
    current = measurements
    index_map = list(range(len(measurements)))
    for _ in range(max_cycles):
        result = run_gn_bp(grid, current, config)
        report = bp_bdt(result, kappa)
        report.removal_history = list(removed)
        if not report.suspect:
            return result, report
        original = index_map[report.argmax]
        removed.append(original)
        report.removal_history = list(removed)
        current = current.without(report.argmax)
        del index_map[report.argmax]
    return result, report


def calibrate_kappa(grid: Grid, clean_sets: list[MeasurementSet],
                    config: GnConfig, factor: float = 3.0) -> float:
    """Threshold heuristic: ``factor`` times the largest clean-run statistic."""
    worst = 0.0
    for ms in clean_sets:
        result = run_gn_bp(grid, ms, config)
        report = bp_bdt(result, math.inf)
        worst = max(worst, report.largest)
    return factor * worst
