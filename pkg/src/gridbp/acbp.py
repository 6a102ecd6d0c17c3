"""Approximate Gaussian message passing directly on the nonlinear model.

Variable-to-factor messages and marginals keep the standard Gaussian algebra.
Factor-to-variable messages are approximated: the mean solves the conditional
expectation of the measurement equation with every other argument fixed at
its incoming mean (a linear, quadratic, or sine-quadratic equation depending
on the target), the variance uses the linear-propagation formula with
Jacobian coefficients evaluated at the current message means.  Quadratic and
sine forms are disambiguated by proximity to a prior state.

Supported measurement kinds: active/reactive flows and injections, and
voltage magnitude (a direct factor).  Run on a DC measurement set the same
machinery reduces exactly to the linear algorithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import CompiledGraph, MessageState, marginals, variable_update
from .errors import ModelError
from .factorgraph import (DIRECT, FactorGraph, build_dc_graph, build_gn_graph)
from .grid import Grid
from .measurements import (DC_KINDS, Measurement, MeasurementSet, P_FLOW,
                           P_INJ, Q_FLOW, Q_INJ, V_MAG)
from .state import StateVector

SUPPORTED_KINDS = frozenset({P_FLOW, Q_FLOW, P_INJ, Q_INJ, V_MAG})

LINEAR, QUADRATIC, SINE_QUADRATIC = "linear", "quadratic", "sine_quadratic"

_COEFF_FLOOR = 1e-14
_UNINFORMATIVE = 1e60
# Optional second-moment term of the quadratic mean condition (the outgoing
# variance enters the conditional expectation of x^2).  Feeding the variance
# back into the mean map destabilizes the iteration on meshed networks --
# seeded at the exact solution it drifts away -- so the default solves the
# deterministic quadratic and the term is opt-in.
_MOMENT_BOUND = 1e3


@dataclass(frozen=True)
class PriorState:
    """Per-variable prior means used only to pick among candidate roots."""

    theta: np.ndarray
    vm: np.ndarray

    @classmethod
    def flat(cls, n_bus: int) -> "PriorState":
        return cls(np.zeros(n_bus), np.ones(n_bus))

    @classmethod
    def from_state(cls, x: StateVector) -> "PriorState":
        return cls(x.theta.copy(), x.vm.copy())

    def value(self, var_id: int, n_bus: int) -> float:
        return self.theta[var_id] if var_id < n_bus else self.vm[var_id - n_bus]


@dataclass(frozen=True)
class MeanEquation:
    """One factor-to-variable mean condition.

    linear:          a*x + b = 0
    quadratic:       a*x^2 + b*x + c = 0      (x is the target mean)
    sine_quadratic:  a*s^2 + b*s + c = 0 for s = sin(x), derived from
                     alpha*sin(x) + beta*cos(x) = gamma (kept for branch
                     selection).
    """

    form: str
    a: float
    b: float
    c: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    @property
    def discriminant(self) -> float:
        return self.b * self.b - 4.0 * self.a * self.c


def sine_equation(alpha: float, beta: float, gamma: float) -> MeanEquation:
    """Quadratic in sin(x) equivalent to alpha*sin + beta*cos = gamma."""
    return MeanEquation(SINE_QUADRATIC,
                        a=alpha * alpha + beta * beta,
                        b=-2.0 * alpha * gamma,
                        c=gamma * gamma - beta * beta,
                        alpha=alpha, beta=beta, gamma=gamma)


def solve_mean(eq: MeanEquation, prior: float, previous: float,
               counters: dict | None = None) -> float:
    """Pick the mean from the equation; prior breaks the two-root ambiguity.

    Negative discriminants fall back to the prior; a vanishing linear
    coefficient falls back to the previous mean.  Sine roots outside [-1, 1]
    are clamped (and counted when ``counters`` is given).
    """
    if eq.form == LINEAR:
        if abs(eq.a) < _COEFF_FLOOR:
            if counters is not None:
                counters["degenerate_linear"] = counters.get("degenerate_linear", 0) + 1
            return previous
        return -eq.b / eq.a
    if abs(eq.a) < _COEFF_FLOOR:
        # quadratic degenerates to linear in x (or sin x)
        inner = solve_mean(MeanEquation(LINEAR, eq.b, eq.c), prior, previous,
                           counters)
        if eq.form == QUADRATIC:
            return inner
        return _sine_branch(min(max(inner, -1.0), 1.0), eq, prior)
    disc = eq.discriminant
    if disc < 0.0:
        if counters is not None:
            counters["negative_discriminant"] = counters.get("negative_discriminant", 0) + 1
        return prior
    root = math.sqrt(disc)
    lo = (-eq.b - root) / (2.0 * eq.a)
    hi = (-eq.b + root) / (2.0 * eq.a)
    lo, hi = min(lo, hi), max(lo, hi)
    if eq.form == QUADRATIC:
        d_lo, d_hi = abs(lo - prior), abs(hi - prior)
        return lo if d_lo <= d_hi else hi  # ties go to the smaller root
    # sine form: clamp the sines, then pick the cos-consistent branch of each
    cands = []
    for s in (lo, hi):
        if abs(s) > 1.0:
            if counters is not None:
                counters["clamped_sine"] = counters.get("clamped_sine", 0) + 1
            s = min(max(s, -1.0), 1.0)
        cands.append(_sine_branch(s, eq, prior))
    d = [abs(_wrap(c - prior)) for c in cands]
    return cands[0] if d[0] <= d[1] else cands[1]


def _wrap(angle: float) -> float:
    return math.atan2(math.sin(angle), math.cos(angle))


def _sine_branch(s: float, eq: MeanEquation, prior: float) -> float:
    """Angle with the given sine; cosine sign from the source identity when
    available, otherwise the branch nearest the prior."""
    if abs(eq.beta) > _COEFF_FLOOR:
        return math.atan2(s, (eq.gamma - eq.alpha * s) / eq.beta)
    base = math.asin(s)
    alt = math.pi - base
    return base if abs(_wrap(base - prior)) <= abs(_wrap(alt - prior)) else alt


# -- scalar builders (reference implementation for the vectorized run) ------


@dataclass(frozen=True)
class _FlowContext:
    g: float
    b: float
    g_s: float
    b_s: float
    is_reactive: bool
    z: float


def _flow_context(m: Measurement, grid: Grid) -> _FlowContext:
    i, j = m.branch
    ob = grid.branch_between(i, j).oriented(i, j)
    return _FlowContext(ob.g, ob.b, ob.g_s, ob.b_s, m.kind == Q_FLOW, m.value)


def build_mean_equation(m: Measurement, grid: Grid, target: tuple[str, int],
                        incoming: dict) -> MeanEquation:
    """Conditional-expectation equation for one factor-to-variable mean.

    ``target`` is ("theta"|"vm", bus); ``incoming`` maps ("theta"|"vm", bus)
    to the incoming variable-to-factor means of all other arguments.
    """
    if m.kind == V_MAG:
        if target != ("vm", m.bus):
            raise ModelError("voltage magnitude only constrains its own bus")
        return MeanEquation(LINEAR, 1.0, -m.value)
    if m.kind in (P_FLOW, Q_FLOW):
        return _flow_mean_equation(_flow_context(m, grid), m.branch, target,
                                   incoming)
    if m.kind in (P_INJ, Q_INJ):
        return _injection_mean_equation(m, grid, target, incoming)
    raise ModelError(f"{m.kind} has no closed-form mean equation")


def _flow_mean_equation(fc: _FlowContext, branch, target, incoming):
    i, j = branch
    role, bus = target
    g, b = fc.g, fc.b
    if role == "vm" and bus == i:
        ti, tj = incoming[("theta", i)], incoming[("theta", j)]
        vj = incoming[("vm", j)]
        tij = ti - tj
        if fc.is_reactive:
            a = -(fc.b + fc.b_s)
            bb = -vj * (g * math.sin(tij) - b * math.cos(tij))
        else:
            a = fc.g + fc.g_s
            bb = -vj * (g * math.cos(tij) + b * math.sin(tij))
        return MeanEquation(QUADRATIC, a, bb, -fc.z)
    if role == "vm" and bus == j:
        ti, tj = incoming[("theta", i)], incoming[("theta", j)]
        vi = incoming[("vm", i)]
        tij = ti - tj
        if fc.is_reactive:
            a = -vi * (g * math.sin(tij) - b * math.cos(tij))
            bb = -vi * vi * (fc.b + fc.b_s) - fc.z
        else:
            a = -vi * (g * math.cos(tij) + b * math.sin(tij))
            bb = vi * vi * (fc.g + fc.g_s) - fc.z
        return MeanEquation(LINEAR, a, bb)
    vi, vj = incoming[("vm", i)], incoming[("vm", j)]
    if role == "theta" and bus == i:
        tj = incoming[("theta", j)]
        if fc.is_reactive:
            gamma = -(fc.z + vi * vi * (fc.b + fc.b_s)) / (vi * vj)
            alpha = g * math.cos(tj) - b * math.sin(tj)
            beta = -(g * math.sin(tj) + b * math.cos(tj))
        else:
            gamma = (vi * vi * (fc.g + fc.g_s) - fc.z) / (vi * vj)
            alpha = g * math.sin(tj) + b * math.cos(tj)
            beta = g * math.cos(tj) - b * math.sin(tj)
        return sine_equation(alpha, beta, gamma)
    if role == "theta" and bus == j:
        ti = incoming[("theta", i)]
        if fc.is_reactive:
            gamma = -(fc.z + vi * vi * (fc.b + fc.b_s)) / (vi * vj)
            alpha = -(g * math.cos(ti) + b * math.sin(ti))
            beta = g * math.sin(ti) - b * math.cos(ti)
        else:
            gamma = (vi * vi * (fc.g + fc.g_s) - fc.z) / (vi * vj)
            alpha = g * math.sin(ti) - b * math.cos(ti)
            beta = g * math.cos(ti) + b * math.sin(ti)
        return sine_equation(alpha, beta, gamma)
    raise ModelError(f"variable {target} is not an argument of this flow")


def _injection_mean_equation(m: Measurement, grid: Grid, target, incoming):
    y = grid.admittance
    i = m.bus
    role, bus = target
    neigh = grid.neighbors(i)
    reactive = m.kind == Q_INJ
    yii = y[i - 1, i - 1]
    diag = -yii.imag if reactive else yii.real
    vi = incoming.get(("vm", i))
    ti = incoming.get(("theta", i))

    def branch_term(k, tik):
        yk = y[i - 1, k - 1]
        if reactive:
            return yk.real * math.sin(tik) - yk.imag * math.cos(tik)
        return yk.real * math.cos(tik) + yk.imag * math.sin(tik)

    if role == "vm" and bus == i:
        s = sum(incoming[("vm", k)] * branch_term(k, ti - incoming[("theta", k)])
                for k in neigh)
        return MeanEquation(QUADRATIC, diag, s, -m.value)
    if role == "theta" and bus == i:
        pc = ps = 0.0
        for k in neigh:
            yk = y[i - 1, k - 1]
            vk, tk = incoming[("vm", k)], incoming[("theta", k)]
            if reactive:
                pc += vk * (-yk.real * math.sin(tk) - yk.imag * math.cos(tk))
                ps += vk * (yk.real * math.cos(tk) - yk.imag * math.sin(tk))
            else:
                pc += vk * (yk.real * math.cos(tk) - yk.imag * math.sin(tk))
                ps += vk * (yk.real * math.sin(tk) + yk.imag * math.cos(tk))
        return sine_equation(vi * ps, vi * pc, m.value - vi * vi * diag)
    if bus not in neigh:
        raise ModelError(f"variable {target} is not an argument of this injection")
    rest = vi * vi * diag + vi * sum(
        incoming[("vm", k)] * branch_term(k, ti - incoming[("theta", k)])
        for k in neigh if k != bus)
    yj = y[i - 1, bus - 1]
    if role == "vm":
        a = vi * branch_term(bus, ti - incoming[("theta", bus)])
        return MeanEquation(LINEAR, a, rest - m.value)
    vk = incoming[("vm", bus)]
    if reactive:
        alpha = -vi * vk * (yj.real * math.cos(ti) + yj.imag * math.sin(ti))
        beta = vi * vk * (yj.real * math.sin(ti) - yj.imag * math.cos(ti))
    else:
        alpha = vi * vk * (yj.real * math.sin(ti) - yj.imag * math.cos(ti))
        beta = vi * vk * (yj.real * math.cos(ti) + yj.imag * math.sin(ti))
    return sine_equation(alpha, beta, m.value - rest)


def variance_fv(m: Measurement, grid: Grid, target: tuple[str, int],
                point: dict, incoming_variances: dict) -> float:
    """Linear-propagation variance with Jacobian coefficients at ``point``
    (target at its previous outgoing mean, others at incoming means)."""
    from .measurements import eval_jacobian_row
    n = grid.n_bus
    theta = np.zeros(n)
    vm = np.ones(n)
    for (role, bus), val in point.items():
        if role == "theta":
            theta[bus - 1] = val
        else:
            vm[bus - 1] = val
    row = eval_jacobian_row(m, StateVector(theta, vm), grid, "ac")
    t_idx = (target[1] - 1) if target[0] == "theta" else (n + target[1] - 1)
    c_s = row.get(t_idx, 0.0)
    if abs(c_s) < _COEFF_FLOOR:
        return _UNINFORMATIVE
    acc = m.variance
    for (role, bus), var in incoming_variances.items():
        if (role, bus) == target:
            continue
        idx = (bus - 1) if role == "theta" else (n + bus - 1)
        acc += row.get(idx, 0.0) ** 2 * var
    return acc / c_s**2


# -- full run ----------------------------------------------------------------


def build_ac_graph(grid: Grid, measurements: MeasurementSet,
                   prior: PriorState) -> FactorGraph:
    """Factor graph over (theta, vm) with flow/injection indirect factors and
    voltage-magnitude direct factors; virtual priors come from ``prior``."""
    for m in measurements:
        if m.kind not in SUPPORTED_KINDS:
            raise ModelError(f"{m.kind} is not supported by the nonlinear "
                             "message-passing estimator")
    n = grid.n_bus
    virtual_priors = {}
    for k in range(n):
        virtual_priors[k] = (prior.theta[k], 1e60)
        virtual_priors[n + k] = (prior.vm[k], 1e60)
    return build_gn_graph(grid, measurements, virtual_priors=virtual_priors)


@dataclass
class AcBpResult:
    means: np.ndarray
    variances: np.ndarray
    iterations: int
    converged: bool
    last_change: float
    counters: dict = field(default_factory=dict)
    wrss_trace: list = field(default_factory=list)

    def state(self, grid: Grid) -> StateVector:
        n = grid.n_bus
        return StateVector(self.means[:n], self.means[n:])


def run_ac_bp(grid: Grid, measurements: MeasurementSet,
              prior: PriorState | None = None, max_iter: int = 3000,
              tol: float = 1e-9, model: str = "ac",
              wrss_every: int = 0, second_moment: bool = False,
              damping: float = 0.0) -> AcBpResult:
    """Synchronous run of the nonlinear message passing.

    ``model="dc"`` routes a DC measurement set through the same machinery
    (all mean equations degenerate to the linear form).  ``wrss_every``
    records the objective at the marginal means every so many iterations.
    """
    prior = prior or PriorState.flat(grid.n_bus)
    if model == "dc":
        graph = build_dc_graph(grid, measurements)
    else:
        graph = build_ac_graph(grid, measurements, prior)
    cg = CompiledGraph.from_factor_graph(graph) if model == "dc" else \
        CompiledGraph.from_factor_graph(_unit_structure(graph))
    updater = _DcUpdater(graph, cg) if model == "dc" else \
        _AcUpdater(graph, cg, grid, prior, second_moment)

    # locals seed the variable->factor buffers; outgoing messages then start
    # as copies of the incoming ones (they provide the first linearization)
    state = MessageState(np.zeros(cg.b), np.full(cg.b, np.inf),
                         np.zeros(cg.b), np.zeros(cg.b))
    prec = cg.local_prec[cg.edge_var]
    state.v_vf = 1.0 / prec
    state.z_vf = cg.local_wmean[cg.edge_var] * state.v_vf
    state.z_fv = state.z_vf.copy()
    state.v_fv = state.v_vf.copy()

    counters: dict = {}
    wrss_trace: list = []
    converged = False
    last_change = np.inf
    it = 0
    prev_step = np.zeros(cg.b)
    for it in range(1, max_iter + 1):
        z_new, v_new = updater.factor_update(state, counters)
        if damping > 0.0 and it > 1:
            z_new = damping * state.z_fv + (1.0 - damping) * z_new
        step = z_new - state.z_fv
        if it > 2:
            # means bouncing between two roots show up as large sign-flipping
            # consecutive steps
            flip = (np.sign(step) * np.sign(prev_step) < 0) & \
                (np.abs(step) > 0.05) & (np.abs(prev_step) > 0.05)
            if flip.any():
                counters["oscillating_updates"] = \
                    counters.get("oscillating_updates", 0) + int(flip.sum())
        prev_step = step
        last_change = float(np.max(np.abs(z_new - state.z_fv))) if cg.b else 0.0
        state.z_fv, state.v_fv = z_new, v_new
        variable_update(cg, state)
        if wrss_every and (it % wrss_every == 0 or it == max_iter):
            m_mean, _ = marginals(cg, state)
            wrss_trace.append((it, _wrss_at(graph, grid, m_mean, model)))
        if last_change < tol:
            converged = True
            break
    means, variances = marginals(cg, state)
    return AcBpResult(means, variances, it, converged, last_change, counters,
                      wrss_trace)


def _wrss_at(graph, grid, means, model):
    from .reference import wrss
    n = grid.n_bus
    if model == "dc":
        x = StateVector(means, np.ones(n))
    else:
        x = StateVector(means[:n], means[n:])
    return wrss(graph.measurements, x, grid, model)


def _unit_structure(graph: FactorGraph) -> FactorGraph:
    from .factorgraph import FactorNode, INDIRECT
    factors = [FactorNode(f.id, f.kind, f.variables, f.z, f.v, f.measurement,
                          tuple(1.0 for _ in f.variables) if f.kind == INDIRECT
                          else f.coeffs)
               for f in graph.factors]
    return FactorGraph(graph.variables, factors, graph.model, graph.grid,
                       graph.measurements)


class _DcUpdater:
    """Linear route: identical algebra to the DC factor update."""

    def __init__(self, graph: FactorGraph, cg: CompiledGraph):
        self.cg = cg

    def factor_update(self, state: MessageState, counters: dict):
        from .engine import factor_update
        return factor_update(self.cg, state)


class _AcUpdater:
    """Nonlinear factor-to-variable updates, vectorized over flow factors."""

    def __init__(self, graph: FactorGraph, cg: CompiledGraph,
                 grid: Grid, prior: PriorState, second_moment: bool = False):
        self.cg = cg
        self.grid = grid
        self.second_moment = second_moment
        self.n = grid.n_bus
        ms = graph.measurements
        edge_of = graph.edge_index

        flows = [f for f in graph.indirect_factors
                 if ms[f.measurement].kind in (P_FLOW, Q_FLOW)]
        self.injections = [f for f in graph.indirect_factors
                           if ms[f.measurement].kind in (P_INJ, Q_INJ)]
        self.ms = ms
        self.graph = graph
        self.prior = prior

        nf = len(flows)
        self.nf = nf
        self.f_is_q = np.zeros(nf, dtype=bool)
        self.f_g = np.zeros(nf)
        self.f_b = np.zeros(nf)
        self.f_gs = np.zeros(nf)
        self.f_bs = np.zeros(nf)
        self.f_z = np.zeros(nf)
        self.f_v = np.zeros(nf)
        self.e_ti = np.zeros(nf, dtype=np.intp)
        self.e_tj = np.zeros(nf, dtype=np.intp)
        self.e_vi = np.zeros(nf, dtype=np.intp)
        self.e_vj = np.zeros(nf, dtype=np.intp)
        self.pr_ti = np.zeros(nf)
        self.pr_tj = np.zeros(nf)
        self.pr_vi = np.zeros(nf)
        self.pr_vj = np.zeros(nf)
        for k, f in enumerate(flows):
            m = ms[f.measurement]
            i, j = m.branch
            ob = grid.branch_between(i, j).oriented(i, j)
            self.f_is_q[k] = m.kind == Q_FLOW
            self.f_g[k], self.f_b[k] = ob.g, ob.b
            self.f_gs[k], self.f_bs[k] = ob.g_s, ob.b_s
            self.f_z[k], self.f_v[k] = m.value, m.variance
            self.e_ti[k] = edge_of[(f.id, i - 1)]
            self.e_tj[k] = edge_of[(f.id, j - 1)]
            self.e_vi[k] = edge_of[(f.id, self.n + i - 1)]
            self.e_vj[k] = edge_of[(f.id, self.n + j - 1)]
            self.pr_ti[k] = prior.theta[i - 1]
            self.pr_tj[k] = prior.theta[j - 1]
            self.pr_vi[k] = prior.vm[i - 1]
            self.pr_vj[k] = prior.vm[j - 1]

        # injection bookkeeping: per-factor neighbour-slot arrays
        self.inj_data = []
        y = grid.admittance
        for f in self.injections:
            m = ms[f.measurement]
            i = m.bus
            neigh = grid.neighbors(i)
            self.inj_data.append({
                "reactive": m.kind == Q_INJ, "z": m.value, "v": m.variance,
                "gkk": y[i - 1, i - 1].real, "bkk": y[i - 1, i - 1].imag,
                "gk": np.array([y[i - 1, k - 1].real for k in neigh]),
                "bk": np.array([y[i - 1, k - 1].imag for k in neigh]),
                "e_ti": edge_of[(f.id, i - 1)],
                "e_vi": edge_of[(f.id, self.n + i - 1)],
                "e_tk": np.array([edge_of[(f.id, k - 1)] for k in neigh],
                                 dtype=np.intp),
                "e_vk": np.array([edge_of[(f.id, self.n + k - 1)] for k in neigh],
                                 dtype=np.intp),
                "pr_ti": prior.theta[i - 1], "pr_vi": prior.vm[i - 1],
                "pr_tk": np.array([prior.theta[k - 1] for k in neigh]),
                "pr_vk": np.array([prior.vm[k - 1] for k in neigh]),
            })

    # -- flows, fully vectorized ---------------------------------------

    def _flow_coeff(self, vi, vj, tij, reactive):
        """Jacobian entries of a flow at the given evaluation point."""
        g, b, gs, bs = self.f_g, self.f_b, self.f_gs, self.f_bs
        ct, st = np.cos(tij), np.sin(tij)
        gcbs = g * ct + b * st
        gsbc = g * st - b * ct
        c_ti = np.where(reactive, -vi * vj * gcbs, vi * vj * gsbc)
        c_vi = np.where(reactive, -vj * gsbc - 2.0 * vi * (b + bs),
                        -vj * gcbs + 2.0 * vi * (g + gs))
        c_vj = np.where(reactive, -vi * gsbc, -vi * gcbs)
        return c_ti, -c_ti, c_vi, c_vj

    def factor_update(self, state: MessageState, counters: dict):
        z_new = state.z_fv.copy()
        v_new = state.v_fv.copy()
        if self.nf:
            self._update_flows(state, z_new, v_new, counters)
        for data in self.inj_data:
            self._update_injection(data, state, z_new, v_new, counters)
        return z_new, v_new

    def _update_flows(self, state, z_new, v_new, counters):
        g, b, gs, bs = self.f_g, self.f_b, self.f_gs, self.f_bs
        q = self.f_is_q
        zin_ti = state.z_vf[self.e_ti]
        zin_tj = state.z_vf[self.e_tj]
        zin_vi = state.z_vf[self.e_vi]
        zin_vj = state.z_vf[self.e_vj]
        vin_ti = state.v_vf[self.e_ti]
        vin_tj = state.v_vf[self.e_tj]
        vin_vi = state.v_vf[self.e_vi]
        vin_vj = state.v_vf[self.e_vj]
        zout_ti = state.z_fv[self.e_ti]
        zout_tj = state.z_fv[self.e_tj]
        zout_vi = state.z_fv[self.e_vi]
        zout_vj = state.z_fv[self.e_vj]

        # variances: linear error propagation with Jacobian coefficients
        # evaluated at the incoming means (the rest-of-graph belief).
        # Evaluating the target at its own previous outgoing mean self-locks
        # zero-flow branches: a transient V=0 mean kills the very angle
        # sensitivities that should keep the message uninformative.
        c_ti, c_tj, c_vi, c_vj = self._flow_coeff(zin_vi, zin_vj,
                                                  zin_ti - zin_tj, q)
        for eidx, c_s, others in (
                (self.e_ti, c_ti, ((c_tj, vin_tj), (c_vi, vin_vi), (c_vj, vin_vj))),
                (self.e_tj, c_tj, ((c_ti, vin_ti), (c_vi, vin_vi), (c_vj, vin_vj))),
                (self.e_vi, c_vi, ((c_ti, vin_ti), (c_tj, vin_tj), (c_vj, vin_vj))),
                (self.e_vj, c_vj, ((c_ti, vin_ti), (c_tj, vin_tj), (c_vi, vin_vi)))):
            acc = self.f_v + sum(c * c * vv for c, vv in others)
            with np.errstate(divide="ignore", invalid="ignore"):
                var = acc / (c_s * c_s)
            small = np.abs(c_s) < _COEFF_FLOOR
            if small.any():
                counters["uninformative_variance"] = \
                    counters.get("uninformative_variance", 0) + int(small.sum())
            v_new[eidx] = np.where(small, _UNINFORMATIVE, var)

        # means
        tij_in = zin_ti - zin_tj
        ct, st = np.cos(tij_in), np.sin(tij_in)
        gcbs = g * ct + b * st
        gsbc = g * st - b * ct

        # target vm_i: quadratic a x^2 + b x + (c + a*v_out) = 0; the variance
        # term only makes sense while the message is informative
        qa = np.where(q, -(b + bs), g + gs)
        qb = np.where(q, -zin_vj * gsbc, -zin_vj * gcbs)
        if self.second_moment:
            v_corr = np.where(v_new[self.e_vi] < _MOMENT_BOUND,
                              v_new[self.e_vi], 0.0)
        else:
            v_corr = 0.0
        qc = -self.f_z + qa * v_corr
        z_new[self.e_vi], neg = _solve_quadratic_vec(qa, qb, qc, self.pr_vi,
                                                     zout_vi, counters)
        v_new[self.e_vi] = np.where(neg, _UNINFORMATIVE, v_new[self.e_vi])
        # target vm_j: linear
        la = np.where(q, -zin_vi * gsbc, -zin_vi * gcbs)
        lb = np.where(q, -zin_vi**2 * (b + bs) - self.f_z,
                      zin_vi**2 * (g + gs) - self.f_z)
        z_new[self.e_vj] = _solve_linear_vec(la, lb, zout_vj, counters)
        # sine targets
        gamma = np.where(q, -(self.f_z + zin_vi**2 * (b + bs)),
                         zin_vi**2 * (g + gs) - self.f_z) / (zin_vi * zin_vj)
        cj, sj = np.cos(zin_tj), np.sin(zin_tj)
        alpha_i = np.where(q, g * cj - b * sj, g * sj + b * cj)
        beta_i = np.where(q, -(g * sj + b * cj), g * cj - b * sj)
        z_new[self.e_ti], neg = _solve_sine_vec(alpha_i, beta_i, gamma,
                                                self.pr_ti, zin_ti, vin_ti,
                                                counters)
        v_new[self.e_ti] = np.where(neg, _UNINFORMATIVE, v_new[self.e_ti])
        ci, si = np.cos(zin_ti), np.sin(zin_ti)
        alpha_j = np.where(q, -(g * ci + b * si), g * si - b * ci)
        beta_j = np.where(q, g * si - b * ci, g * ci + b * si)
        z_new[self.e_tj], neg = _solve_sine_vec(alpha_j, beta_j, gamma,
                                                self.pr_tj, zin_tj, vin_tj,
                                                counters)
        v_new[self.e_tj] = np.where(neg, _UNINFORMATIVE, v_new[self.e_tj])

    # -- injections, per-factor slot arrays --------------------------------

    def _update_injection(self, d, state, z_new, v_new, counters):
        reactive, z, v = d["reactive"], d["z"], d["v"]
        gk, bk, diag = d["gk"], d["bk"], d["gkk"] if not reactive else -d["bkk"]
        e_ti, e_vi, e_tk, e_vk = d["e_ti"], d["e_vi"], d["e_tk"], d["e_vk"]
        ti, vi = state.z_vf[e_ti], state.z_vf[e_vi]
        tk, vk = state.z_vf[e_tk], state.z_vf[e_vk]
        vti, vvi = state.v_vf[e_ti], state.v_vf[e_vi]
        vtk, vvk = state.v_vf[e_tk], state.v_vf[e_vk]

        def term(ct, st):
            return gk * st - bk * ct if reactive else gk * ct + bk * st

        def dterm(ct, st):  # d(term)/d(theta_ik)
            return gk * ct + bk * st if reactive else -gk * st + bk * ct

        ct, st = np.cos(ti - tk), np.sin(ti - tk)
        term0, dterm0 = term(ct, st), dterm(ct, st)
        sum_vterm = float(np.sum(vk * term0))
        sum_vdterm = float(np.sum(vk * dterm0))
        c_tk0 = -vi * vk * dterm0
        c_vk0 = vi * term0
        contrib = c_tk0**2 * vtk + c_vk0**2 * vvk
        contrib_excl = _excl_1d(contrib)

        def emit(e, c_s, acc, eq_a, eq_b, eq_c, prior, sine_abg=None):
            if abs(c_s) < _COEFF_FLOOR:
                counters["uninformative_variance"] = \
                    counters.get("uninformative_variance", 0) + 1
                v_new[e] = _UNINFORMATIVE
            else:
                v_new[e] = acc / c_s**2
            if sine_abg is not None:
                val, bad = _solve_sine_vec(
                    np.asarray([sine_abg[0]]), np.asarray([sine_abg[1]]),
                    np.asarray([sine_abg[2]]), np.asarray([prior]),
                    np.asarray([state.z_vf[e]]), np.asarray([state.v_vf[e]]),
                    counters)
                z_new[e] = val[0]
                if bad[0]:
                    v_new[e] = _UNINFORMATIVE
                return
            if eq_c is None:
                eq = MeanEquation(LINEAR, eq_a, eq_b)
            else:
                c_full = eq_c
                if self.second_moment and v_new[e] < _MOMENT_BOUND:
                    c_full = eq_c + eq_a * v_new[e]
                eq = MeanEquation(QUADRATIC, eq_a, eq_b, c_full)
            z_new[e] = solve_mean(eq, prior, state.z_fv[e], counters)
            if eq.form == QUADRATIC and abs(eq.a) >= _COEFF_FLOOR \
                    and eq.discriminant < 0.0:
                v_new[e] = _UNINFORMATIVE

        # all Jacobian coefficients at the incoming means (see the flow
        # update for why the target is not substituted)
        c_ti0 = vi * sum_vdterm
        c_vi0 = sum_vterm + 2.0 * vi * diag
        contrib_total = float(np.sum(contrib))

        # target theta_i
        ck, sk = np.cos(tk), np.sin(tk)
        pc = gk * ck - bk * sk
        ps = gk * sk + bk * ck
        alpha = vi * float(np.sum(vk * (pc if reactive else ps)))
        beta = vi * float(np.sum(vk * (-ps if reactive else pc)))
        emit(e_ti, c_ti0, v + c_vi0**2 * vvi + contrib_total, 0, 0, 0,
             d["pr_ti"], sine_abg=(alpha, beta, z - vi * vi * diag))

        # target vm_i
        emit(e_vi, c_vi0, v + c_ti0**2 * vti + contrib_total,
             diag, sum_vterm, -z, d["pr_vi"])

        # targets theta_k / vm_k per neighbour slot
        acc_base = v + c_ti0**2 * vti + c_vi0**2 * vvi + contrib_excl
        cti_in, sti_in = np.cos(ti), np.sin(ti)
        if reactive:
            alpha_k = -vi * vk * (gk * cti_in + bk * sti_in)
            beta_k = vi * vk * (gk * sti_in - bk * cti_in)
        else:
            alpha_k = vi * vk * (gk * sti_in - bk * cti_in)
            beta_k = vi * vk * (gk * cti_in + bk * sti_in)
        gamma_k = z - vi * vi * diag - vi * (sum_vterm - vk * term0)
        lin_b = vi * vi * diag + vi * (sum_vterm - vk * term0) - z
        for s in range(gk.size):
            emit(e_tk[s], c_tk0[s], acc_base[s] + c_vk0[s]**2 * vvk[s],
                 0, 0, 0, d["pr_tk"][s],
                 sine_abg=(alpha_k[s], beta_k[s], gamma_k[s]))
            emit(e_vk[s], c_vk0[s], acc_base[s] + c_tk0[s]**2 * vtk[s],
                 c_vk0[s], lin_b[s], None, d["pr_vk"][s])


def _excl_1d(values: np.ndarray) -> np.ndarray:
    """Leave-one-out sums of a short vector (prefix+suffix, no subtraction)."""
    n = values.size
    out = np.zeros(n)
    if n <= 1:
        return out
    cs = np.cumsum(values)
    rs = np.cumsum(values[::-1])[::-1]
    out[1:] += cs[:-1]
    out[:-1] += rs[1:]
    return out


# -- vectorized root selection helpers ---------------------------------------


def _solve_linear_vec(a, b, previous, counters):
    small = np.abs(a) < _COEFF_FLOOR
    if small.any():
        counters["degenerate_linear"] = counters.get("degenerate_linear", 0) \
            + int(small.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -b / a
    return np.where(small, previous, out)


def _solve_quadratic_vec(a, b, c, prior, previous, counters):
    lin = _solve_linear_vec(b, c, previous, {})
    small_a = np.abs(a) < _COEFF_FLOOR
    disc = b * b - 4.0 * a * c
    neg = disc < 0.0
    if neg.any():
        counters["negative_discriminant"] = \
            counters.get("negative_discriminant", 0) + int(neg.sum())
    root = np.sqrt(np.where(neg, 0.0, disc))
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = (-b - root) / (2.0 * a)
        hi = (-b + root) / (2.0 * a)
    lo2 = np.minimum(lo, hi)
    hi2 = np.maximum(lo, hi)
    pick = np.where(np.abs(lo2 - prior) <= np.abs(hi2 - prior), lo2, hi2)
    out = np.where(neg, prior, pick)
    return np.where(small_a, lin, out), neg & ~small_a


def _select_angle(a1, a2, static_prior, in_mean, in_var):
    """Pick between two candidate angles.

    A candidate far outside the operating range (more than ~70 degrees from
    the static prior) is rejected outright; between two plausible candidates
    the incoming belief decides, and while its spread cannot separate them the
    pick is flagged unreliable (the message should carry no weight yet).
    """
    d1s = np.abs(_wrap_vec(a1 - static_prior))
    d2s = np.abs(_wrap_vec(a2 - static_prior))
    plaus1, plaus2 = d1s < 1.2, d2s < 1.2
    only1 = plaus1 & ~plaus2
    only2 = plaus2 & ~plaus1
    d1i = np.abs(_wrap_vec(a1 - in_mean))
    d2i = np.abs(_wrap_vec(a2 - in_mean))
    pick_in = np.where(d1i <= d2i, a1, a2)
    pick = np.where(only1, a1, np.where(only2, a2, pick_in))
    sep = np.abs(_wrap_vec(a1 - a2))
    anchored = np.sqrt(np.minimum(in_var, 1e6)) < sep / 3.0
    # nearly coincident candidates carry no real ambiguity (<~3 degrees)
    unreliable = ~(only1 | only2) & ~anchored & (sep > 0.05)
    return pick, unreliable


def _solve_sine_vec(alpha, beta, gamma, static_prior, in_mean, in_var,
                    counters):
    a = alpha * alpha + beta * beta
    b = -2.0 * alpha * gamma
    c = gamma * gamma - beta * beta
    disc = b * b - 4.0 * a * c
    neg = disc < 0.0
    if neg.any():
        counters["negative_discriminant"] = \
            counters.get("negative_discriminant", 0) + int(neg.sum())
    root = np.sqrt(np.where(neg, 0.0, disc))
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = (-b - root) / (2.0 * a)
        s2 = (-b + root) / (2.0 * a)
    clipped = (np.abs(s1) > 1.0) | (np.abs(s2) > 1.0)
    if clipped.any():
        counters["clamped_sine"] = counters.get("clamped_sine", 0) \
            + int(clipped.sum())
    s1 = np.clip(s1, -1.0, 1.0)
    s2 = np.clip(s2, -1.0, 1.0)

    def angle(s):
        safe_beta = np.where(np.abs(beta) < _COEFF_FLOOR, 1.0, beta)
        cand = np.arctan2(s, (gamma - alpha * s) / safe_beta)
        base = np.arcsin(s)
        alt = np.pi - base
        near = np.where(np.abs(_wrap_vec(base - static_prior))
                        <= np.abs(_wrap_vec(alt - static_prior)), base, alt)
        return np.where(np.abs(beta) < _COEFF_FLOOR, near, cand)

    a1, a2 = angle(s1), angle(s2)
    pick, unreliable = _select_angle(a1, a2, static_prior, in_mean, in_var)
    return np.where(neg, static_prior, pick), neg | unreliable


def _wrap_vec(angles):
    return np.arctan2(np.sin(angles), np.cos(angles))
