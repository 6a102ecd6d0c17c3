"""Gaussian belief propagation for the linear angle-only model.

Message algebra (precision-weighted products at variable nodes, linear
marginalization at factor nodes) in both a scalar per-message form and the
vectorized synchronous run.  Randomized damping mixes selected
factor-to-variable means with their previous-iteration values; variances are
never damped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import (CompiledGraph, MessageState, init_state, marginals,
                     run_message_passing)
from .factorgraph import FactorGraph


@dataclass(frozen=True)
class GaussianMessage:
    mean: float
    variance: float

    def __post_init__(self):
        if self.variance <= 0.0:
            raise ValueError("message variance must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    """Scheduling knobs for a message-passing run.

    ``mode`` is "synchronous" or "randomized_damping"; for the latter a
    Bernoulli(p) per-edge mask is drawn once from ``seed`` and held fixed
    (``resample_mask`` redraws it each iteration instead).
    """

    mode: str = "synchronous"
    p: float = 0.6
    alpha1: float = 0.5
    max_iter: int = 10000
    tol: float = 1e-12
    seed: int = 0
    resample_mask: bool = False

    def __post_init__(self):
        if self.mode not in ("synchronous", "randomized_damping"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "randomized_damping" and not (0.0 < self.alpha1 < 1.0):
            raise ValueError("alpha1 must lie in (0, 1)")
        if self.tol <= 0.0:
            raise ValueError("tolerance must be positive")

    @property
    def alpha2(self) -> float:
        return 1.0 - self.alpha1

    def draw_mask(self, b: int) -> np.ndarray | None:
        if self.mode != "randomized_damping":
            return None
        rng = np.random.default_rng(self.seed)
        return rng.random(b) < self.p


@dataclass
class BpRunResult:
    means: np.ndarray
    variances: np.ndarray
    iterations: int
    converged: bool
    last_change: float
    diverged: bool = False
    trace: list = field(default_factory=list)

    def state(self, grid):
        from .state import StateVector
        return StateVector(self.means, np.ones(grid.n_bus))


# -- scalar message operations (the unit-testable algebra) ------------------


def variable_to_factor(incoming: list[GaussianMessage]) -> GaussianMessage:
    """Combine the incoming messages of all other edges: precisions add,
    means combine precision-weighted."""
    if not incoming:
        raise ValueError("a variable node always hears from its local factor")
    prec = sum(1.0 / m.variance for m in incoming)
    mean = sum(m.mean / m.variance for m in incoming) / prec
    return GaussianMessage(mean, 1.0 / prec)


def factor_to_variable(z: float, v: float, target_coeff: float,
                       others: list[tuple[float, GaussianMessage]]) -> GaussianMessage:
    """Marginalize the linear factor onto the target variable.

    ``others`` pairs each non-target edge's coefficient with its incoming
    variable-to-factor message.
    """
    if target_coeff == 0.0:
        raise ZeroDivisionError("target coefficient must be nonzero")
    mean = (z - sum(c * m.mean for c, m in others)) / target_coeff
    var = (v + sum(c * c * m.variance for c, m in others)) / target_coeff**2
    return GaussianMessage(mean, var)


def marginal(incoming: list[GaussianMessage]) -> GaussianMessage:
    """Posterior of a variable node: product of all incoming messages."""
    return variable_to_factor(incoming)


def damp_means(current: np.ndarray, previous: np.ndarray,
               mask: np.ndarray, alpha1: float) -> np.ndarray:
    """Per-edge convex combination on masked edges; others keep the current
    value.  Variances are never damped."""
    current = np.asarray(current, dtype=float)
    if mask is None:
        return current.copy()
    return np.where(mask, alpha1 * np.asarray(previous, dtype=float)
                    + (1.0 - alpha1) * current, current)


# -- full run ---------------------------------------------------------------


def run_dc_bp(graph: FactorGraph, schedule: ScheduleConfig | None = None,
              keep_trace: bool = False,
              initial: MessageState | None = None) -> BpRunResult:
    """Synchronous (optionally damped) run until the largest
    factor-to-variable mean change drops below the schedule tolerance."""
    schedule = schedule or ScheduleConfig()
    cg = CompiledGraph.from_factor_graph(graph)
    state = initial.copy() if initial is not None else init_state(cg)
    mask = schedule.draw_mask(cg.b)
    trace: list = []
    cb = (lambda it, st: trace.append((it, st.z_fv.copy(), st.v_fv.copy()))) \
        if keep_trace else None
    rng = np.random.default_rng(schedule.seed) if schedule.resample_mask else None
    stats = run_message_passing(
        cg, state, schedule.max_iter, schedule.tol, damp_mask=mask,
        alpha1=schedule.alpha1 if mask is not None else 0.0, rng=rng,
        resample_mask=schedule.resample_mask, mask_p=schedule.p, trace=cb)
    means, variances = marginals(cg, state)
    return BpRunResult(means, variances, stats.iterations, stats.converged,
                       stats.last_change, stats.diverged, trace)
