"""Measurement kinds, measurement functions h(x), Jacobian rows, synthesis.

All angles are radians internally; values and variances are per-unit. The
stacked state ordering is [theta_1..theta_N, vm_1..vm_N]; sparse Jacobian rows
are dicts keyed by stacked index.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ModelError, ObservabilityError
from .grid import Grid
from .state import StateVector

P_FLOW = "p_flow"
Q_FLOW = "q_flow"
I_MAG = "i_mag"
P_INJ = "p_inj"
Q_INJ = "q_inj"
V_MAG = "v_mag"
V_ANGLE = "v_angle"      # phasor voltage angle
I_MAG_PMU = "i_mag_pmu"  # phasor current magnitude (same h as i_mag)
I_ANGLE = "i_angle"      # phasor current angle

ALL_KINDS = (P_FLOW, Q_FLOW, I_MAG, P_INJ, Q_INJ, V_MAG, V_ANGLE, I_MAG_PMU, I_ANGLE)
BRANCH_KINDS = frozenset({P_FLOW, Q_FLOW, I_MAG, I_MAG_PMU, I_ANGLE})
BUS_KINDS = frozenset({P_INJ, Q_INJ, V_MAG, V_ANGLE})
DC_KINDS = frozenset({P_FLOW, P_INJ, V_ANGLE})

REAL_TIME, PSEUDO = "real_time", "pseudo"
PSEUDO_VARIANCE = 1e60


@dataclass(frozen=True)
class Measurement:
    """One metered quantity.

    ``bus`` is set for bus kinds, ``branch`` (a directed pair) for branch
    kinds.  ``aging`` optionally references an aging profile by name; it is
    carried opaquely here and interpreted by the streaming estimator.
    """

    kind: str
    value: float
    variance: float
    bus: int | None = None
    branch: tuple[int, int] | None = None
    role: str = REAL_TIME
    aging: object | None = None

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "variance", float(self.variance))
        # zero is a degenerate test-only value (noise-free generation);
        # estimators require strictly positive variances
        if self.variance < 0:
            raise ValueError("measurement variance must not be negative")
        if self.kind in BRANCH_KINDS:
            if self.branch is None:
                raise ValueError(f"{self.kind} requires a directed branch")
            object.__setattr__(self, "branch", tuple(self.branch))
        elif self.bus is None:
            raise ValueError(f"{self.kind} requires a bus")
        if self.role not in (REAL_TIME, PSEUDO):
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def location(self):
        return self.branch if self.branch is not None else self.bus

    def describe(self) -> str:
        where = f"{self.branch[0]}-{self.branch[1]}" if self.branch else str(self.bus)
        return f"{self.kind}@{where}"


class MeasurementSet:
    """Ordered list of measurements; the order fixes all stacked row orders."""

    def __init__(self, measurements: Iterable[Measurement]):
        self._items = tuple(measurements)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, k):
        return self._items[k]

    def __eq__(self, other):
        return isinstance(other, MeasurementSet) and self._items == other._items

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for m in self._items:
            out[m.kind] = out.get(m.kind, 0) + 1
        return out

    def without(self, index: int) -> "MeasurementSet":
        return MeasurementSet(m for k, m in enumerate(self._items) if k != index)

    def replace_value(self, index: int, value: float) -> "MeasurementSet":
        items = list(self._items)
        items[index] = replace(items[index], value=value)
        return MeasurementSet(items)

    def real_time_only(self) -> "MeasurementSet":
        return MeasurementSet(m for m in self._items if m.role == REAL_TIME)

    # -- serialization ----------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "i", "j", "z", "v", "role"])
        for m in self._items:
            i = m.branch[0] if m.branch else m.bus
            j = m.branch[1] if m.branch else ""
            w.writerow([m.kind, i, j, repr(m.value), repr(m.variance), m.role])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MeasurementSet":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["kind", "i", "j", "z", "v", "role"]:
            raise ValueError("bad measurement CSV header")
        out = []
        for kind, i, j, z, v, role in rows[1:]:
            if j:
                out.append(Measurement(kind, float(z), float(v),
                                       branch=(int(i), int(j)), role=role))
            else:
                out.append(Measurement(kind, float(z), float(v),
                                       bus=int(i), role=role))
        return cls(out)

    def to_json(self) -> str:
        return json.dumps([{
            "kind": m.kind, "bus": m.bus, "branch": list(m.branch) if m.branch else None,
            "z": m.value, "v": m.variance, "role": m.role,
        } for m in self._items])

    @classmethod
    def from_json(cls, text: str) -> "MeasurementSet":
        out = []
        for d in json.loads(text):
            out.append(Measurement(d["kind"], d["z"], d["v"], bus=d["bus"],
                                   branch=tuple(d["branch"]) if d["branch"] else None,
                                   role=d["role"]))
        return cls(out)


# -- measurement functions ------------------------------------------------


def eval_h(m: Measurement, x: StateVector, grid: Grid, model: str = "ac") -> float:
    """Value of the measurement function at state ``x``."""
    if model == "dc":
        return _eval_h_dc(m, x, grid)
    if model != "ac":
        raise ModelError(f"unknown model {model!r}")
    th, vm = x.theta, x.vm
    if m.kind in (V_MAG,):
        return vm[m.bus - 1]
    if m.kind == V_ANGLE:
        return th[m.bus - 1]
    if m.kind in (P_FLOW, Q_FLOW):
        i, j = m.branch
        ob = grid.branch_between(i, j).oriented(i, j)
        vi, vj = vm[i - 1], vm[j - 1]
        tij = th[i - 1] - th[j - 1]
        if m.kind == P_FLOW:
            return vi * vi * (ob.g + ob.g_s) - vi * vj * (
                ob.g * math.cos(tij) + ob.b * math.sin(tij))
        return -vi * vi * (ob.b + ob.b_s) - vi * vj * (
            ob.g * math.sin(tij) - ob.b * math.cos(tij))
    if m.kind in (I_MAG, I_MAG_PMU):
        i, j = m.branch
        a, bb, c, d = grid.branch_between(i, j).current_coefficients(i)
        vi, vj = vm[i - 1], vm[j - 1]
        tij = th[i - 1] - th[j - 1]
        arg = (a * vi * vi + bb * vj * vj
               - 2.0 * vi * vj * (c * math.cos(tij) - d * math.sin(tij)))
        # rounding can push an exactly-zero current slightly negative
        return math.sqrt(max(arg, 0.0))
    if m.kind == I_ANGLE:
        re, im = _current_rect(m, x, grid)
        return math.atan2(im, re)
    if m.kind == P_INJ or m.kind == Q_INJ:
        y = grid.admittance
        i = m.bus
        vi = vm[i - 1]
        acc = 0.0
        for j in [i] + grid.neighbors(i):
            yij = y[i - 1, j - 1]
            tij = th[i - 1] - th[j - 1]
            if m.kind == P_INJ:
                acc += vm[j - 1] * (yij.real * math.cos(tij) + yij.imag * math.sin(tij))
            else:
                acc += vm[j - 1] * (yij.real * math.sin(tij) - yij.imag * math.cos(tij))
        return vi * acc
    raise ModelError(f"cannot evaluate {m.kind} on the ac model")


def _current_rect(m: Measurement, x: StateVector, grid: Grid) -> tuple[float, float]:
    """Rectangular components of the branch current seen from the from-side."""
    i, j = m.branch
    ob = grid.branch_between(i, j).oriented(i, j)
    aa, ba = ob.g + ob.g_s, ob.b + ob.b_s
    ca, da = ob.g, ob.b
    vi, vj = x.vm[i - 1], x.vm[j - 1]
    ti, tj = x.theta[i - 1], x.theta[j - 1]
    re = vi * (aa * math.cos(ti) - ba * math.sin(ti)) - vj * (
        ca * math.cos(tj) - da * math.sin(tj))
    im = vi * (aa * math.sin(ti) + ba * math.cos(ti)) - vj * (
        ca * math.sin(tj) + da * math.cos(tj))
    return re, im


def _eval_h_dc(m: Measurement, x: StateVector, grid: Grid) -> float:
    th = x.theta
    if m.kind == P_FLOW:
        i, j = m.branch
        beta = grid.branch_between(i, j).dc_susceptance
        return beta * (th[i - 1] - th[j - 1])
    if m.kind == P_INJ:
        i = m.bus
        acc = 0.0
        for j in grid.neighbors(i):
            acc += grid.branch_between(i, j).dc_susceptance * (th[i - 1] - th[j - 1])
        return acc
    if m.kind == V_ANGLE:
        return th[m.bus - 1]
    raise ModelError(f"{m.kind} is not a DC-model measurement kind")


# -- Jacobian rows ---------------------------------------------------------


def eval_jacobian_row(m: Measurement, x: StateVector, grid: Grid,
                      model: str = "ac") -> dict[int, float]:
    """Sparse Jacobian row as {stacked state index: partial derivative}.

    Stacked indices: theta_k -> k-1, vm_k -> N + k - 1.
    """
    n = grid.n_bus
    if model == "dc":
        return _jac_dc(m, grid)
    if model != "ac":
        raise ModelError(f"unknown model {model!r}")
    th, vm = x.theta, x.vm

    def ti(k):
        return k - 1

    def vix(k):
        return n + k - 1

    if m.kind == V_MAG:
        return {vix(m.bus): 1.0}
    if m.kind == V_ANGLE:
        return {ti(m.bus): 1.0}

    if m.kind in (P_FLOW, Q_FLOW):
        i, j = m.branch
        ob = grid.branch_between(i, j).oriented(i, j)
        g, b, gs, bs = ob.g, ob.b, ob.g_s, ob.b_s
        vi, vj = vm[i - 1], vm[j - 1]
        tij = th[i - 1] - th[j - 1]
        ct, st = math.cos(tij), math.sin(tij)
        if m.kind == P_FLOW:
            dth = vi * vj * (g * st - b * ct)
            return {ti(i): dth, ti(j): -dth,
                    vix(i): -vj * (g * ct + b * st) + 2.0 * vi * (g + gs),
                    vix(j): -vi * (g * ct + b * st)}
        dth = -vi * vj * (g * ct + b * st)
        return {ti(i): dth, ti(j): -dth,
                vix(i): -vj * (g * st - b * ct) - 2.0 * vi * (b + bs),
                vix(j): -vi * (g * st - b * ct)}

    if m.kind in (I_MAG, I_MAG_PMU):
        i, j = m.branch
        a, bb, c, d = grid.branch_between(i, j).current_coefficients(i)
        vi, vj = vm[i - 1], vm[j - 1]
        tij = th[i - 1] - th[j - 1]
        ct, st = math.cos(tij), math.sin(tij)
        h = eval_h(m, x, grid, "ac")
        if h <= 0.0:
            raise ObservabilityError(
                f"current magnitude {m.describe()} vanishes at the linearization "
                "point; its Jacobian row is singular")
        dth = vi * vj * (d * ct + c * st) / h
        return {ti(i): dth, ti(j): -dth,
                vix(i): (vj * (d * st - c * ct) + a * vi) / h,
                vix(j): (vi * (d * st - c * ct) + bb * vj) / h}

    if m.kind == I_ANGLE:
        i, j = m.branch
        a, bb, c, d = grid.branch_between(i, j).current_coefficients(i)
        vi, vj = vm[i - 1], vm[j - 1]
        tij = th[i - 1] - th[j - 1]
        ct, st = math.cos(tij), math.sin(tij)
        re, im = _current_rect(m, x, grid)
        i2 = re * re + im * im
        if i2 <= 0.0:
            raise ObservabilityError(
                f"current {m.describe()} vanishes at the linearization point; "
                "its angle Jacobian row is singular")
        return {ti(i): (a * vi * vi + (d * st - c * ct) * vi * vj) / i2,
                ti(j): (bb * vj * vj + (d * st - c * ct) * vi * vj) / i2,
                vix(i): -vj * (c * st + d * ct) / i2,
                vix(j): vi * (c * st + d * ct) / i2}

    if m.kind in (P_INJ, Q_INJ):
        y = grid.admittance
        i = m.bus
        vi = vm[i - 1]
        neigh = grid.neighbors(i)
        gii, bii = y[i - 1, i - 1].real, y[i - 1, i - 1].imag
        row: dict[int, float] = {}
        sum_p = 0.0  # sum_j vj (G cos + B sin), j != i
        sum_q = 0.0  # sum_j vj (G sin - B cos), j != i
        for j in neigh:
            gij, bij = y[i - 1, j - 1].real, y[i - 1, j - 1].imag
            tij = th[i - 1] - th[j - 1]
            ct, st = math.cos(tij), math.sin(tij)
            vj = vm[j - 1]
            sum_p += vj * (gij * ct + bij * st)
            sum_q += vj * (gij * st - bij * ct)
            if m.kind == P_INJ:
                row[ti(j)] = vi * vj * (gij * st - bij * ct)
                row[vix(j)] = vi * (gij * ct + bij * st)
            else:
                row[ti(j)] = -vi * vj * (gij * ct + bij * st)
                row[vix(j)] = vi * (gij * st - bij * ct)
        if m.kind == P_INJ:
            row[ti(i)] = -vi * sum_q
            row[vix(i)] = sum_p + 2.0 * vi * gii
        else:
            row[ti(i)] = vi * sum_p
            row[vix(i)] = sum_q - 2.0 * vi * bii
        return row

    raise ModelError(f"cannot differentiate {m.kind} on the ac model")


def _jac_dc(m: Measurement, grid: Grid) -> dict[int, float]:
    if m.kind == P_FLOW:
        i, j = m.branch
        beta = grid.branch_between(i, j).dc_susceptance
        return {i - 1: beta, j - 1: -beta}
    if m.kind == P_INJ:
        i = m.bus
        row = {i - 1: 0.0}
        for j in grid.neighbors(i):
            beta = grid.branch_between(i, j).dc_susceptance
            row[i - 1] += beta
            row[j - 1] = -beta
        return row
    if m.kind == V_ANGLE:
        return {m.bus - 1: 1.0}
    raise ModelError(f"{m.kind} is not a DC-model measurement kind")


def stacked_jacobian(measurements: Sequence[Measurement], x: StateVector,
                     grid: Grid, model: str = "ac") -> np.ndarray:
    """Dense k×n Jacobian (n = N for dc, 2N for ac), rows in set order."""
    n = grid.n_bus if model == "dc" else 2 * grid.n_bus
    jac = np.zeros((len(measurements), n))
    for r, m in enumerate(measurements):
        for c, val in eval_jacobian_row(m, x, grid, model).items():
            jac[r, c] = val
    return jac


# -- synthetic measurement sets -------------------------------------------


@dataclass(frozen=True)
class MeasurementPlan:
    """What to synthesize from a solved state.

    Either ``placements`` lists (kind, location) sites explicitly, or
    ``redundancy`` picks round(gamma * n_state) random sites from the pool of
    eligible locations for ``kinds`` (without replacement).  ``n_state`` is
    2N−1 for the ac model and N−1 for dc.  ``variances`` maps kind -> v.
    """

    model: str = "ac"
    kinds: tuple[str, ...] = (P_FLOW, Q_FLOW, P_INJ, Q_INJ, V_MAG)
    variances: dict = field(default_factory=dict)
    redundancy: float | None = None
    placements: tuple | None = None
    pmu_buses: tuple[int, ...] = ()
    pmu_variance: float = 1e-10
    default_variance: float = 1e-4
    require_observable: bool = True
    max_retries: int = 50

    def variance_of(self, kind: str) -> float:
        if kind in self.variances:
            return self.variances[kind]
        if kind in (V_ANGLE, I_MAG_PMU, I_ANGLE):
            return self.pmu_variance
        return self.default_variance


def eligible_sites(grid: Grid, kinds: Sequence[str]) -> list[tuple[str, object]]:
    """All (kind, location) pairs the grid supports, in a stable order."""
    sites: list[tuple[str, object]] = []
    for kind in kinds:
        if kind in BRANCH_KINDS:
            for br in grid.branches:
                sites.append((kind, (br.i, br.j)))
                sites.append((kind, (br.j, br.i)))
        else:
            for bus in grid.buses:
                sites.append((kind, bus.id))
    return sites


def _as_measurement(kind: str, loc, value: float, variance: float) -> Measurement:
    if kind in BRANCH_KINDS:
        return Measurement(kind, value, variance, branch=loc)
    return Measurement(kind, value, variance, bus=loc)


def generate_measurements(grid: Grid, solution: StateVector,
                          plan: MeasurementPlan, seed: int = 0) -> MeasurementSet:
    """Draw z = h(solution) + N(0, v) for a placement plan.

    With ``require_observable`` the random placement is redrawn until the
    stacked Jacobian at the solution has full column rank (slack angle
    removed), up to ``max_retries`` attempts.
    """
    rng = np.random.default_rng(seed)
    n_state = (grid.n_bus - 1) if plan.model == "dc" else (2 * grid.n_bus - 1)
    slack_col = grid.slack_bus - 1

    if plan.placements is not None:
        chosen = [(k, tuple(loc) if isinstance(loc, (tuple, list)) else loc)
                  for k, loc in plan.placements]
        attempts = 1
    else:
        if plan.redundancy is None:
            raise ValueError("plan needs either placements or a redundancy")
        pool = eligible_sites(grid, plan.kinds)
        count = int(round(plan.redundancy * n_state))
        if count > len(pool):
            raise ObservabilityError(
                f"redundancy {plan.redundancy} needs {count} sites but only "
                f"{len(pool)} are eligible")
        attempts = plan.max_retries
        chosen = None

    for _ in range(attempts):
        if plan.placements is None:
            idx = rng.choice(len(pool), size=count, replace=False)
            chosen = [pool[k] for k in sorted(idx)]
        ms = []
        for kind, loc in chosen:
            v = plan.variance_of(kind)
            m = _as_measurement(kind, loc, 0.0, v)
            truth = eval_h(m, solution, grid, plan.model)
            noise = rng.normal(0.0, math.sqrt(v)) if v > 0 else 0.0
            ms.append(_as_measurement(kind, loc, truth + noise, v))
        if not plan.require_observable:
            return MeasurementSet(ms)
        jac = stacked_jacobian(ms, solution, grid, plan.model)
        jac = np.delete(jac, slack_col, axis=1)
        rank = np.linalg.matrix_rank(jac)
        if rank == n_state:
            return MeasurementSet(ms)
        if plan.placements is not None:
            raise ObservabilityError(
                "fixed placements are unobservable", deficiency=n_state - rank)
    raise ObservabilityError(
        f"no observable placement found in {plan.max_retries} attempts",
        deficiency=None)


def pmu_voltage_pair(grid: Grid, solution: StateVector, bus: int,
                     variance: float, rng) -> list[Measurement]:
    """Voltage phasor measurement as (magnitude, angle) pair at one bus."""
    out = []
    for kind in (V_MAG, V_ANGLE):
        m = _as_measurement(kind, bus, 0.0, variance)
        truth = eval_h(m, solution, grid, "ac")
        out.append(_as_measurement(kind, bus, truth + rng.normal(0.0, math.sqrt(variance)), variance))
    return out
