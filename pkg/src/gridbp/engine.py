"""Vectorized synchronous Gaussian message passing over a factor graph.

Messages live on indirect-factor edges in the canonical edge order.  Both
half-iterations need leave-one-out sums (all neighbours except the target
edge); those are computed with per-group prefix+suffix cumulative sums over
padded (group x slot) matrices rather than total-minus-own subtraction, which
would cancel catastrophically given the 1e-60..1e+60 variance range of slack
and uninformative priors.

Within a half-iteration every edge update is independent; the arrays make the
schedule exactly synchronous (reads touch only the previous buffers), so a
parallel evaluation would be bit-identical to this sequential one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factorgraph import INDIRECT, FactorGraph


def _padded_layout(group_of: np.ndarray, n_groups: int):
    """Row/col position of each element within its (stable-ordered) group."""
    order = np.argsort(group_of, kind="stable")
    cols = np.empty(group_of.size, dtype=np.intp)
    counts = np.zeros(n_groups, dtype=np.intp)
    for pos in order:
        g = group_of[pos]
        cols[pos] = counts[g]
        counts[g] += 1
    width = int(counts.max()) if counts.size else 0
    return group_of.astype(np.intp), cols, width


def _exclusive_sum(padded: np.ndarray) -> np.ndarray:
    """Per-row sums excluding each slot (prefix+suffix, no subtraction)."""
    if padded.size == 0:
        return padded
    cs = np.cumsum(padded, axis=1)
    prefix = np.empty_like(padded)
    prefix[:, 0] = 0.0
    prefix[:, 1:] = cs[:, :-1]
    rcs = np.cumsum(padded[:, ::-1], axis=1)[:, ::-1]
    suffix = np.empty_like(padded)
    suffix[:, -1] = 0.0
    suffix[:, :-1] = rcs[:, 1:]
    return prefix + suffix


class CompiledGraph:
    """Numeric arrays for one linearized system over a factor graph.

    ``coeff`` may contain zeros (locally insensitive measurements); the
    corresponding edges are deactivated: they emit an uninformative message
    and are skipped by the convergence test.
    """

    def __init__(self, n_var: int, edge_var: np.ndarray, edge_fac: np.ndarray,
                 m: int, coeff: np.ndarray, fac_z: np.ndarray, fac_v: np.ndarray,
                 local_prec: np.ndarray, local_wmean: np.ndarray):
        self.n_var = n_var
        self.b = edge_var.size
        self.m = m
        self.edge_var = np.asarray(edge_var, dtype=np.intp)
        self.edge_fac = np.asarray(edge_fac, dtype=np.intp)
        self.coeff = np.asarray(coeff, dtype=float)
        self.fac_z = np.asarray(fac_z, dtype=float)
        self.fac_v = np.asarray(fac_v, dtype=float)
        self.local_prec = np.asarray(local_prec, dtype=float)
        self.local_wmean = np.asarray(local_wmean, dtype=float)
        self.active = self.coeff != 0.0
        if np.any(self.local_prec <= 0.0):
            raise ValueError("every variable needs a positive local precision")
        fr, fc, self.fac_width = _padded_layout(self.edge_fac, m)
        self.fac_rows, self.fac_cols = fr, fc
        vr, vc, self.var_width = _padded_layout(self.edge_var, n_var)
        self.var_rows, self.var_cols = vr, vc

    def with_values(self, coeff: np.ndarray, fac_z: np.ndarray,
                    fac_v: np.ndarray, local_prec: np.ndarray,
                    local_wmean: np.ndarray) -> "CompiledGraph":
        """Same structure, fresh numeric values (relinearization step)."""
        new = object.__new__(CompiledGraph)
        new.__dict__.update(self.__dict__)
        new.coeff = np.asarray(coeff, dtype=float)
        new.fac_z = np.asarray(fac_z, dtype=float)
        new.fac_v = np.asarray(fac_v, dtype=float)
        new.local_prec = np.asarray(local_prec, dtype=float)
        new.local_wmean = np.asarray(local_wmean, dtype=float)
        new.active = new.coeff != 0.0
        return new

    @classmethod
    def from_factor_graph(cls, graph: FactorGraph) -> "CompiledGraph":
        n_var = len(graph.variables)
        edge_var = np.array([v for (_, v) in graph.edges], dtype=np.intp)
        fac_ord = {f.id: k for k, f in enumerate(graph.indirect_factors)}
        edge_fac = np.array([fac_ord[f] for (f, _) in graph.edges], dtype=np.intp)
        coeff = np.empty(len(graph.edges))
        for k, (fid, var) in enumerate(graph.edges):
            f = graph.factors[fid]
            if f.coeffs is None:
                raise ValueError("factor graph carries no edge coefficients")
            coeff[k] = f.coeffs[f.variables.index(var)]
        fac_z = np.array([f.z for f in graph.indirect_factors])
        fac_v = np.array([f.v for f in graph.indirect_factors])
        local_prec = np.zeros(n_var)
        local_wmean = np.zeros(n_var)
        for f in graph.local_factors:
            var = f.variables[0]
            local_prec[var] += 1.0 / f.v
            local_wmean[var] += f.z / f.v
        return cls(n_var, edge_var, edge_fac, len(graph.indirect_factors),
                   coeff, fac_z, fac_v, local_prec, local_wmean)

    # padding helpers -------------------------------------------------------

    def pad_f(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros((self.m, self.fac_width))
        out[self.fac_rows, self.fac_cols] = values
        return out

    def pad_v(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_var, self.var_width))
        out[self.var_rows, self.var_cols] = values
        return out

    def gather_f(self, padded: np.ndarray) -> np.ndarray:
        return padded[self.fac_rows, self.fac_cols]

    def gather_v(self, padded: np.ndarray) -> np.ndarray:
        return padded[self.var_rows, self.var_cols]


@dataclass
class MessageState:
    """Edge-indexed message buffers (factor->variable and variable->factor)."""

    z_fv: np.ndarray
    v_fv: np.ndarray
    z_vf: np.ndarray
    v_vf: np.ndarray

    def copy(self) -> "MessageState":
        return MessageState(self.z_fv.copy(), self.v_fv.copy(),
                            self.z_vf.copy(), self.v_vf.copy())


def init_state(cg: CompiledGraph) -> MessageState:
    """Seed variable->factor messages from local factors only (the standard
    initialization); factor->variable messages start absent (0, inf)."""
    prec = cg.local_prec[cg.edge_var]
    v_vf = 1.0 / prec
    z_vf = cg.local_wmean[cg.edge_var] * v_vf
    return MessageState(np.zeros(cg.b), np.full(cg.b, np.inf), z_vf, v_vf)


def variable_update(cg: CompiledGraph, state: MessageState) -> None:
    """Recompute variable->factor messages from the current f->v buffers."""
    w = np.where(np.isfinite(state.v_fv), 1.0 / state.v_fv, 0.0)
    wm = np.where(np.isfinite(state.v_fv), state.z_fv * w, 0.0)
    excl_w = cg.gather_v(_exclusive_sum(cg.pad_v(w)))
    excl_m = cg.gather_v(_exclusive_sum(cg.pad_v(wm)))
    prec = cg.local_prec[cg.edge_var] + excl_w
    state.v_vf = 1.0 / prec
    state.z_vf = (cg.local_wmean[cg.edge_var] + excl_m) * state.v_vf


def init_from_fv(cg: CompiledGraph, z_fv: np.ndarray,
                 v_fv: np.ndarray) -> MessageState:
    """Seed a run from given factor->variable messages (used by the matrix
    cross-checks and by warm restarts)."""
    state = MessageState(np.asarray(z_fv, dtype=float).copy(),
                         np.asarray(v_fv, dtype=float).copy(),
                         np.zeros(cg.b), np.zeros(cg.b))
    variable_update(cg, state)
    return state


def factor_update(cg: CompiledGraph, state: MessageState) -> tuple[np.ndarray, np.ndarray]:
    """New factor->variable messages from the current v->f buffers."""
    c2v = cg.coeff**2 * state.v_vf
    cz = cg.coeff * state.z_vf
    excl_v = cg.gather_f(_exclusive_sum(cg.pad_f(c2v)))
    excl_z = cg.gather_f(_exclusive_sum(cg.pad_f(cz)))
    with np.errstate(divide="ignore", invalid="ignore"):
        v_new = (cg.fac_v[cg.edge_fac] + excl_v) / cg.coeff**2
        z_new = (cg.fac_z[cg.edge_fac] - excl_z) / cg.coeff
    v_new = np.where(cg.active, v_new, np.inf)
    z_new = np.where(cg.active, z_new, 0.0)
    return z_new, v_new


@dataclass
class RunStats:
    iterations: int
    converged: bool
    last_change: float
    diverged: bool = False


def run_message_passing(cg: CompiledGraph, state: MessageState, max_iter: int,
                        tol: float, damp_mask: np.ndarray | None = None,
                        alpha1: float = 0.0, rng=None, resample_mask: bool = False,
                        trace=None, divergence_cap: float = 1e12,
                        mask_p: float = 0.0) -> RunStats:
    """Iterate synchronized factor/variable half-updates until the largest
    factor->variable mean change drops below ``tol``.

    Damping (when ``damp_mask`` is given) replaces masked means with
    alpha1*previous + (1-alpha1)*current; variances are never damped.  With
    ``resample_mask`` the Bernoulli mask is redrawn each iteration from
    ``rng`` at probability ``mask_p``.
    """
    alpha2 = 1.0 - alpha1
    last_change = np.inf
    first_change = None
    for it in range(1, max_iter + 1):
        z_new, v_new = factor_update(cg, state)
        if damp_mask is not None:
            if resample_mask:
                damp_mask = rng.random(cg.b) < mask_p
            damped = alpha1 * state.z_fv + alpha2 * z_new
            # undamped on the first pass: there is no previous mean yet
            have_prev = np.isfinite(state.v_fv)
            z_new = np.where(damp_mask & have_prev, damped, z_new)
        prev_finite = np.isfinite(state.v_fv)
        comparable = cg.b == 0 or bool(prev_finite[cg.active].all())
        if cg.b == 0:
            last_change = 0.0
        elif comparable:
            last_change = float(np.abs(z_new - state.z_fv)[cg.active].max())
        else:
            last_change = np.inf  # first pass: nothing to compare against yet
        state.z_fv, state.v_fv = z_new, v_new
        variable_update(cg, state)
        if trace is not None:
            trace(it, state)
        if comparable:
            if last_change < tol:
                return RunStats(it, True, last_change)
            if first_change is None:
                first_change = last_change
            # contraction only shrinks changes; many decades of growth over
            # the whole run is unambiguous divergence
            cap = max(divergence_cap, 1e9 * first_change)
            if not np.isfinite(last_change) or last_change > cap:
                return RunStats(it, False, last_change, diverged=True)
    return RunStats(max_iter, cg.b == 0, last_change)


def marginals(cg: CompiledGraph, state: MessageState) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable posterior means and variances from all incoming messages."""
    w = np.where(np.isfinite(state.v_fv), 1.0 / state.v_fv, 0.0)
    wm = np.where(np.isfinite(state.v_fv), state.z_fv * w, 0.0)
    prec = cg.local_prec + np.bincount(cg.edge_var, weights=w, minlength=cg.n_var)
    num = cg.local_wmean + np.bincount(cg.edge_var, weights=wm, minlength=cg.n_var)
    var = 1.0 / prec
    return num * var, var
