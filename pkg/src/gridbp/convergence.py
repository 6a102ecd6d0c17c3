"""Edge-indexed convergence analysis for the synchronous message iteration.

The variance update and the (variance-frozen) mean update are assembled as
explicit matrix recursions over the canonical edge index.  The spectral radius
of the mean-update matrix certifies convergence: strictly below one means the
damped/synchronous iteration contracts to the unique fixed point, at or above
one it does not.  These dense recursions are deliberately independent of the
message-passing engine so each can serve as the other's oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .engine import CompiledGraph
from .errors import ConvergenceError
from .factorgraph import FactorGraph


@dataclass(frozen=True)
class EdgeSystem:
    """Per-edge arrays of the active (nonzero-coefficient) indirect edges."""

    coeff: np.ndarray        # Jacobian coefficient per edge
    fac_var: np.ndarray      # measurement variance per edge
    fac_mean: np.ndarray     # measurement value per edge
    local_prec: np.ndarray   # summed local-factor precision at the edge's variable
    local_wmean: np.ndarray  # summed precision-weighted local means
    edge_var: np.ndarray
    edge_fac: np.ndarray
    same_factor: np.ndarray  # off-diagonal within-factor mask (b x b)
    shared_var: np.ndarray   # same-variable, different-factor mask (b x b)

    @property
    def b(self) -> int:
        return self.coeff.size


def edge_system(cg: CompiledGraph) -> EdgeSystem:
    keep = np.flatnonzero(cg.active)
    coeff = cg.coeff[keep]
    edge_var = cg.edge_var[keep]
    edge_fac = cg.edge_fac[keep]
    same_factor = (edge_fac[:, None] == edge_fac[None, :])
    np.fill_diagonal(same_factor, False)
    shared_var = (edge_var[:, None] == edge_var[None, :]) & \
        (edge_fac[:, None] != edge_fac[None, :])
    return EdgeSystem(coeff, cg.fac_v[edge_fac], cg.fac_z[edge_fac],
                      cg.local_prec[edge_var], cg.local_wmean[edge_var],
                      edge_var, edge_fac, same_factor, shared_var)


def from_graph(graph: FactorGraph) -> EdgeSystem:
    return edge_system(CompiledGraph.from_factor_graph(graph))


def _vf_precisions(sys: EdgeSystem, v_s: np.ndarray) -> np.ndarray:
    """Diagonal of the variable-side combination: local precision plus the
    precisions arriving over the other factors' edges at the same variable."""
    with np.errstate(divide="ignore"):
        inv = np.where(np.isfinite(v_s), 1.0 / v_s, 0.0)
    return sys.local_prec + sys.shared_var @ inv


def variance_step(sys: EdgeSystem, v_s: np.ndarray) -> np.ndarray:
    """One synchronous update of the edge variances."""
    vv = 1.0 / _vf_precisions(sys, v_s)
    return (sys.fac_var + sys.same_factor @ (sys.coeff**2 * vv)) / sys.coeff**2


def mean_step(sys: EdgeSystem, z_s: np.ndarray, v_s: np.ndarray) -> np.ndarray:
    """One synchronous update of the edge means, given the current variances."""
    vv = 1.0 / _vf_precisions(sys, v_s)
    with np.errstate(invalid="ignore"):
        flows = np.where(np.isfinite(v_s), z_s / v_s, 0.0)
    zz = vv * (sys.local_wmean + sys.shared_var @ flows)
    return (sys.fac_mean - sys.same_factor @ (sys.coeff * zz)) / sys.coeff


def variance_fixed_point(sys: EdgeSystem, v0: np.ndarray | None = None,
                         tol: float = 1e-12, max_iter: int = 100000) -> np.ndarray:
    """Iterate the variance recursion to its (initialization-independent)
    fixed point; relative change below ``tol`` stops the loop."""
    v = np.full(sys.b, np.inf) if v0 is None else np.asarray(v0, dtype=float).copy()
    if sys.b == 0:
        return v
    for _ in range(max_iter):
        v_next = variance_step(sys, v)
        with np.errstate(invalid="ignore"):
            rel = np.abs(v_next - v) / v_next
        v, done = v_next, np.all(rel < tol)
        if done:
            return v
    raise ConvergenceError(
        f"variance recursion did not settle in {max_iter} iterations "
        "(anomalous: it is guaranteed to converge)")


def assemble_omega(sys: EdgeSystem, v_hat: np.ndarray) -> np.ndarray:
    """Mean-update matrix at frozen variances: the means follow
    z' = offset − Omega·z."""
    if sys.b == 0:
        return np.zeros((0, 0))
    vv = 1.0 / _vf_precisions(sys, v_hat)
    d = (sys.same_factor * (sys.coeff[None, :] / sys.coeff[:, None])) * vv[None, :]
    return d @ (sys.shared_var / v_hat[None, :])


def mean_offset(sys: EdgeSystem, v_hat: np.ndarray) -> np.ndarray:
    """Constant term of the frozen-variance mean recursion."""
    if sys.b == 0:
        return np.zeros(0)
    vv = 1.0 / _vf_precisions(sys, v_hat)
    d = (sys.same_factor * (sys.coeff[None, :] / sys.coeff[:, None])) * vv[None, :]
    return sys.fac_mean / sys.coeff - d @ sys.local_wmean


def assemble_omega_damped(omega: np.ndarray, mask: np.ndarray,
                          alpha1: float) -> np.ndarray:
    """Damped mean-update matrix QΩ + (1−α₁)WΩ − α₁W for the Bernoulli mask
    W=diag(mask), Q=I−W."""
    if omega.shape[0] == 0:
        return omega
    w = np.asarray(mask, dtype=float)
    alpha2 = 1.0 - alpha1
    return (1.0 - w)[:, None] * omega + alpha2 * w[:, None] * omega \
        - alpha1 * np.diag(w)


def spectral_radius(matrix: np.ndarray, rel_tol: float = 1e-8,
                    max_iter: int = 300, window: int = 12,
                    seed: int = 0) -> float:
    """Largest eigenvalue magnitude.

    Power iteration with a complex start vector and windowed growth-rate
    estimates (robust to complex-conjugate dominant pairs); falls back to a
    dense eigensolve when the iteration has not stabilized.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    n = a.shape[0]
    if n == 0 or not np.any(a):
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    x /= np.linalg.norm(x)
    logs = []
    est_prev, stable = None, 0
    for _ in range(max_iter):
        y = a @ x
        r = np.linalg.norm(y)
        if r == 0.0:
            x = rng.normal(size=n) + 1j * rng.normal(size=n)
            x /= np.linalg.norm(x)
            continue
        logs.append(np.log(r))
        x = y / r
        if len(logs) >= window:
            est = float(np.exp(np.mean(logs[-window:])))
            if est_prev is not None and abs(est - est_prev) <= rel_tol * max(est, 1e-300):
                stable += 1
                if stable >= window:
                    return est
            else:
                stable = 0
            est_prev = est
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def fixed_point_means(z_tilde: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Solve (I + Omega) z = offset; only valid in the contractive regime."""
    if omega.shape[0] == 0:
        return np.asarray(z_tilde, dtype=float).copy()
    rho = spectral_radius(omega)
    if rho >= 1.0:
        raise ConvergenceError(
            f"mean recursion is not contractive (spectral radius {rho:.6f})")
    return np.linalg.solve(np.eye(omega.shape[0]) + omega, z_tilde)


def marginal_from_edges(cg: CompiledGraph, z_hat: np.ndarray,
                        v_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable marginals implied by fixed-point edge messages."""
    keep = np.flatnonzero(cg.active)
    w = 1.0 / v_hat
    prec = cg.local_prec + np.bincount(cg.edge_var[keep], weights=w,
                                       minlength=cg.n_var)
    num = cg.local_wmean + np.bincount(cg.edge_var[keep], weights=z_hat * w,
                                       minlength=cg.n_var)
    return num / prec, 1.0 / prec


@dataclass
class Certificate:
    """Convergence verdicts for the synchronous and damped schedules."""

    rho_syn: float
    rho_rd: float | None
    converges_syn: bool
    converges_rd: bool | None
    v_hat: np.ndarray
    z_hat: np.ndarray | None

    def to_json(self) -> str:
        return json.dumps({
            "rho_synchronous": self.rho_syn,
            "rho_randomized_damping": self.rho_rd,
            "converges_synchronous": bool(self.converges_syn),
            "converges_randomized_damping":
                None if self.converges_rd is None else bool(self.converges_rd),
            "edge_variances": self.v_hat.tolist(),
            "edge_means": None if self.z_hat is None else self.z_hat.tolist(),
        }, indent=2, sort_keys=True)


def certify(graph: FactorGraph, damping_mask: np.ndarray | None = None,
            alpha1: float = 0.5) -> Certificate:
    """Fixed-point variance computation plus spectral-radius verdicts."""
    cg = CompiledGraph.from_factor_graph(graph)
    sys = edge_system(cg)
    v_hat = variance_fixed_point(sys)
    omega = assemble_omega(sys, v_hat)
    rho_syn = spectral_radius(omega)
    rho_rd = conv_rd = None
    if damping_mask is not None:
        mask = np.asarray(damping_mask, dtype=bool)[cg.active]
        rho_rd = spectral_radius(assemble_omega_damped(omega, mask, alpha1))
        conv_rd = rho_rd < 1.0
    z_hat = None
    if rho_syn < 1.0:
        z_hat = fixed_point_means(mean_offset(sys, v_hat), omega)
    return Certificate(rho_syn, rho_rd, rho_syn < 1.0, conv_rd, v_hat, z_hat)
