"""DC and AC (Newton-Raphson) power flow used to manufacture ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError
from .grid import GENERATOR, LOAD, SLACK, Grid
from .state import StateVector


@dataclass(frozen=True)
class InjectionSpec:
    """Per-bus power-flow specification.

    ``p``/``q`` are net injections in per-unit (generation minus load);
    ``v_set`` holds voltage setpoints for generator and slack buses.
    """

    p: np.ndarray
    q: np.ndarray
    v_set: np.ndarray

    @classmethod
    def from_case(cls, grid: Grid) -> "InjectionSpec":
        p = np.array([b.p_gen - b.p_load for b in grid.buses])
        q = np.array([b.q_gen - b.q_load for b in grid.buses])
        v = np.array([b.v_set for b in grid.buses])
        return cls(p, q, v)

    def scaled(self, factor: float) -> "InjectionSpec":
        return InjectionSpec(self.p * factor, self.q * factor, self.v_set)


def solve_power_flow(grid: Grid, injections: InjectionSpec | None = None,
                     mode: str = "ac", tol: float = 1e-10,
                     max_iter: int = 20, flat_start: bool = True) -> StateVector:
    """Solve the network power flow and return the per-bus state.

    ``dc`` mode solves the linear angle problem (V≡1, susceptance 1/x);
    ``ac`` mode runs Newton-Raphson on the polar mismatch equations until the
    largest active/reactive mismatch is below ``tol``.
    """
    if injections is None:
        injections = InjectionSpec.from_case(grid)
    if mode == "dc":
        return _solve_dc(grid, injections)
    if mode == "ac":
        return _solve_ac(grid, injections, tol, max_iter, flat_start)
    raise ValueError(f"unknown power-flow mode {mode!r}")


def _dc_b_matrix(grid: Grid) -> np.ndarray:
    n = grid.n_bus
    b = np.zeros((n, n))
    for br in grid.branches:
        i, j = br.i - 1, br.j - 1
        s = br.dc_susceptance
        b[i, i] += s
        b[j, j] += s
        b[i, j] -= s
        b[j, i] -= s
    return b


def _solve_dc(grid: Grid, injections: InjectionSpec) -> StateVector:
    n = grid.n_bus
    slack = grid.slack_bus - 1
    keep = [k for k in range(n) if k != slack]
    b = _dc_b_matrix(grid)
    theta = np.zeros(n)
    try:
        theta[keep] = np.linalg.solve(b[np.ix_(keep, keep)], injections.p[keep])
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"singular DC network matrix: {exc}") from None
    return StateVector(theta=theta, vm=np.ones(n))


def _solve_ac(grid: Grid, injections: InjectionSpec, tol: float,
              max_iter: int, flat_start: bool) -> StateVector:
    n = grid.n_bus
    y = grid.admittance
    g, b = y.real, y.imag
    kinds = [bus.kind for bus in grid.buses]
    slack = grid.slack_bus - 1
    pv = [k for k in range(n) if kinds[k] == GENERATOR]
    pq = [k for k in range(n) if kinds[k] == LOAD]
    non_slack = [k for k in range(n) if k != slack]

    theta = np.zeros(n)
    vm = np.ones(n)
    if not flat_start:
        vm = injections.v_set.copy()
    vm[slack] = injections.v_set[slack]
    for k in pv:
        vm[k] = injections.v_set[k]

    def calc_pq(th, v):
        dth = th[:, None] - th[None, :]
        ct, st = np.cos(dth), np.sin(dth)
        p = v * np.sum((g * ct + b * st) * v[None, :], axis=1)
        q = v * np.sum((g * st - b * ct) * v[None, :], axis=1)
        return p, q

    for _ in range(max_iter):
        p, q = calc_pq(theta, vm)
        dp = injections.p[non_slack] - p[non_slack]
        dq = injections.q[pq] - q[pq]
        mismatch = np.concatenate([dp, dq])
        if mismatch.size == 0 or np.max(np.abs(mismatch)) < tol:
            return StateVector(theta=theta, vm=vm)
        jac = _ac_jacobian(g, b, theta, vm, p, q, non_slack, pq)
        try:
            step = np.linalg.solve(jac, mismatch)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular power-flow Jacobian: {exc}") from None
        theta[non_slack] += step[: len(non_slack)]
        vm[pq] += step[len(non_slack):]
    p, q = calc_pq(theta, vm)
    worst = max(np.max(np.abs(injections.p[non_slack] - p[non_slack])),
                np.max(np.abs(injections.q[pq] - q[pq])) if pq else 0.0)
    raise ConvergenceError(
        f"AC power flow did not converge in {max_iter} iterations "
        f"(worst mismatch {worst:.3e} p.u.)")


def _ac_jacobian(g, b, theta, vm, p, q, non_slack, pq):
    dth = theta[:, None] - theta[None, :]
    ct, st = np.cos(dth), np.sin(dth)
    vivj = vm[:, None] * vm[None, :]

    # standard polar blocks; diagonals expressed through computed p, q
    dp_dth = vivj * (g * st - b * ct)
    np.fill_diagonal(dp_dth, -q - vm**2 * np.diag(b))
    dq_dth = -vivj * (g * ct + b * st)
    np.fill_diagonal(dq_dth, p - vm**2 * np.diag(g))
    dp_dv = vm[:, None] * (g * ct + b * st)
    np.fill_diagonal(dp_dv, p / vm + vm * np.diag(g))
    dq_dv = vm[:, None] * (g * st - b * ct)
    np.fill_diagonal(dq_dv, q / vm - vm * np.diag(b))

    top = np.hstack([dp_dth[np.ix_(non_slack, non_slack)],
                     dp_dv[np.ix_(non_slack, pq)]])
    bot = np.hstack([dq_dth[np.ix_(pq, non_slack)],
                     dq_dv[np.ix_(pq, pq)]])
    return np.vstack([top, bot])
