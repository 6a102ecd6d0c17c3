"""Centralized reference solvers and accuracy metrics.

These are the oracles the message-passing estimators are checked against:
a linear WLS solve of the normal equations (dense Cholesky), the iterative
Gauss-Newton loop, the WRSS objective, the MAD convergence metric, and the
largest-normalized-residual test for bad data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, IllConditionedError, ObservabilityError
from .grid import Grid
from .measurements import (MeasurementSet, PSEUDO, eval_h, stacked_jacobian)
from .state import StateVector

_PSEUDO_SCALE = 1e20


@dataclass
class EstimationResult:
    state: StateVector
    iterations: int
    converged: bool
    wrss: float
    mad_history: list[float] = field(default_factory=list)
    method: str = ""
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "wrss": self.wrss,
            "mad_history": list(self.mad_history),
            "state": self.state.to_dict(),
        }
        payload.update({k: v for k, v in self.extras.items()
                        if not k.startswith("_")})
        return json.dumps(payload, indent=2, sort_keys=True)


def _reject_pseudo(measurements: MeasurementSet, solver: str):
    bad = [m.describe() for m in measurements
           if m.role == PSEUDO or m.variance >= _PSEUDO_SCALE]
    if bad:
        raise IllConditionedError(
            f"{solver} refuses pseudo-scale variances (ill-conditioned normal "
            f"equations); offending measurements: {', '.join(bad[:5])}"
            + ("..." if len(bad) > 5 else ""))


def solve_linear_wls(rows: np.ndarray, variances: np.ndarray, z: np.ndarray,
                     slack: int, slack_value: float = 0.0) -> np.ndarray:
    """Solve (Hᵀ R⁻¹ H) x = Hᵀ R⁻¹ z with the slack column pinned.

    ``rows`` is the stacked k×n Jacobian; column ``slack`` is eliminated and
    re-inserted at ``slack_value``.  Raises ObservabilityError (with the rank
    deficiency) when the reduced system is rank deficient.
    """
    rows = np.asarray(rows, dtype=float)
    z = np.asarray(z, dtype=float)
    w = 1.0 / np.asarray(variances, dtype=float)
    keep = [c for c in range(rows.shape[1]) if c != slack]
    h = rows[:, keep]
    rhs = z - rows[:, slack] * slack_value
    gain = (h * w[:, None]).T @ h
    try:
        cho = scipy.linalg.cho_factor(gain)
        sol = scipy.linalg.cho_solve(cho, (h * w[:, None]).T @ rhs)
    except scipy.linalg.LinAlgError:
        rank = np.linalg.matrix_rank(h)
        raise ObservabilityError(
            f"normal equations are rank deficient by {h.shape[1] - rank}",
            deficiency=h.shape[1] - rank) from None
    x = np.empty(rows.shape[1])
    x[keep] = sol
    x[slack] = slack_value
    return x


def wrss(measurements: MeasurementSet, x: StateVector, grid: Grid,
         model: str = "ac") -> float:
    """Weighted residual sum of squares sum_i (z_i - h_i(x))² / v_i."""
    acc = 0.0
    for m in measurements:
        r = m.value - eval_h(m, x, grid, model)
        acc += r * r / m.variance
    return acc


def mad(x_prev: np.ndarray, x_next: np.ndarray) -> float:
    """Mean absolute difference between consecutive state iterates."""
    a = np.asarray(x_prev, dtype=float).ravel()
    b = np.asarray(x_next, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError("mad requires equal-length vectors")
    return float(np.mean(np.abs(b - a)))


def dc_wls_estimate(grid: Grid, measurements: MeasurementSet,
                    slack_value: float = 0.0) -> EstimationResult:
    """Non-iterative DC estimate via the linear WLS solve."""
    _reject_pseudo(measurements, "linear WLS")
    x0 = StateVector.flat(grid.n_bus)
    rows = stacked_jacobian(list(measurements), x0, grid, "dc")
    z = np.array([m.value for m in measurements])
    v = np.array([m.variance for m in measurements])
    theta = solve_linear_wls(rows, v, z, grid.slack_bus - 1, slack_value)
    state = StateVector(theta, np.ones(grid.n_bus))
    return EstimationResult(state, 1, True, wrss(measurements, state, grid, "dc"),
                            [0.0], method="wls")


def gauss_newton(grid: Grid, measurements: MeasurementSet, x0: StateVector,
                 max_iter: int = 12, tol: float = 1e-12,
                 model: str = "ac", divergence_window: int = 5) -> EstimationResult:
    """Iterative normal-equations estimator over the polar state.

    Each iteration solves the linearized WLS subproblem for the state
    increment (slack angle eliminated) and applies it.  Stops when the MAD of
    the increment falls below ``tol``; flags divergence when the MAD grows
    over ``divergence_window`` consecutive iterations.
    """
    _reject_pseudo(measurements, "Gauss-Newton")
    z = np.array([m.value for m in measurements])
    v = np.array([m.variance for m in measurements])
    n = grid.n_bus
    slack = grid.slack_bus - 1
    x = StateVector(x0.theta.copy(), x0.vm.copy())
    history: list[float] = []
    grows = 0
    for it in range(1, max_iter + 1):
        h = np.array([eval_h(m, x, grid, model) for m in measurements])
        jac = stacked_jacobian(list(measurements), x, grid, model)
        dx = solve_linear_wls(jac, v, z - h, slack, 0.0)
        step = mad(np.zeros_like(dx), dx)
        history.append(step)
        if model == "dc":
            x = StateVector(x.theta + dx, x.vm)
        else:
            x = StateVector(x.theta + dx[:n], x.vm + dx[n:])
        if step < tol:
            return EstimationResult(x, it, True, wrss(measurements, x, grid, model),
                                    history, method="gauss-newton")
        if len(history) > 1 and step > history[-2]:
            grows += 1
            if grows >= divergence_window and step > history[0]:
                raise ConvergenceError(
                    f"Gauss-Newton diverging: MAD grew {grows} times, now {step:.3e}")
        else:
            grows = 0
    return EstimationResult(x, max_iter, False, wrss(measurements, x, grid, model),
                            history, method="gauss-newton")


@dataclass
class LnrtReport:
    """Normalized residuals sorted descending, plus the argmax measurement."""

    order: list[int]
    normalized: np.ndarray
    argmax: int
    critical: list[int]

    @property
    def largest(self) -> float:
        return float(self.normalized[self.argmax])


def lnrt(grid: Grid, measurements: MeasurementSet, x_hat: StateVector,
         model: str = "ac") -> LnrtReport:
    """Largest-normalized-residual test at a converged estimate.

    Residuals are normalized by the residual covariance diagonal
    diag(R − H G⁻¹ Hᵀ) with G = Hᵀ R⁻¹ H (slack angle removed).  Measurements
    whose diagonal entry is not positive (critical measurements) are flagged
    and excluded from normalization.
    """
    z = np.array([m.value for m in measurements])
    v = np.array([m.variance for m in measurements])
    h = np.array([eval_h(m, x_hat, grid, model) for m in measurements])
    jac = stacked_jacobian(list(measurements), x_hat, grid, model)
    jac = np.delete(jac, grid.slack_bus - 1, axis=1)
    w = 1.0 / v
    gain = (jac * w[:, None]).T @ jac
    try:
        ginv_ht = np.linalg.solve(gain, jac.T)
    except np.linalg.LinAlgError:
        raise ObservabilityError("gain matrix singular in residual test") from None
    sensitivity_diag = v - np.sum(jac * ginv_ht.T, axis=1)
    resid = z - h
    normalized = np.zeros(len(z))
    critical = []
    floor = 1e-12 * v
    for k in range(len(z)):
        if sensitivity_diag[k] <= floor[k]:
            critical.append(k)
        else:
            normalized[k] = abs(resid[k]) / np.sqrt(sensitivity_diag[k])
    order = sorted(range(len(z)), key=lambda k: -normalized[k])
    return LnrtReport(order, normalized, order[0], critical)
