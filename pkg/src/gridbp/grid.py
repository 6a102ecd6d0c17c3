"""Bus/branch network model with the two-port pi branch representation.

A grid is parsed from a MATPOWER-style text case (``mpc.baseMVA``, ``mpc.bus``,
``mpc.branch``, ``mpc.gen`` sections).  Branches with an off-nominal tap ratio
are converted at parse time into exactly equivalent pi-model branches (series
impedance scaled by the ratio, compensating shunts at both ends), so the rest
of the code only ever sees the symmetric pi model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CaseFormatError

SLACK, GENERATOR, LOAD = "slack", "generator", "load"

_BUS_KIND = {1: LOAD, 2: GENERATOR, 3: SLACK}


@dataclass(frozen=True)
class Bus:
    """One network bus. ``g_s``/``b_s`` are the bus shunt in per-unit."""

    id: int
    kind: str = LOAD
    g_s: float = 0.0
    b_s: float = 0.0
    # case-file operating data, used to build default power-flow injections
    p_load: float = 0.0
    q_load: float = 0.0
    p_gen: float = 0.0
    q_gen: float = 0.0
    v_set: float = 1.0


@dataclass(frozen=True)
class Branch:
    """Two-port pi-model branch between buses ``i`` and ``j``.

    ``r``/``x`` are the (tap-scaled) series impedance; the series admittance
    and the current-coefficient groups are derived, never stored by hand.
    """

    i: int
    j: int
    r: float
    x: float
    g_si: float = 0.0
    b_si: float = 0.0
    g_sj: float = 0.0
    b_sj: float = 0.0

    def __post_init__(self):
        if self.x == 0.0:
            raise CaseFormatError(f"branch {self.i}-{self.j} has zero reactance")

    @property
    def g(self) -> float:
        return self.r / (self.r**2 + self.x**2)

    @property
    def b(self) -> float:
        return -self.x / (self.r**2 + self.x**2)

    @property
    def y_series(self) -> complex:
        return complex(self.g, self.b)

    @property
    def dc_susceptance(self) -> float:
        """Lossless susceptance 1/x used by the DC (angle-only) model."""
        return 1.0 / self.x

    def shunt(self, end: int) -> complex:
        """Shunt admittance attached at bus ``end`` (must be i or j)."""
        if end == self.i:
            return complex(self.g_si, self.b_si)
        if end == self.j:
            return complex(self.g_sj, self.b_sj)
        raise ValueError(f"bus {end} is not an end of branch {self.i}-{self.j}")

    def oriented(self, frm: int, to: int) -> "OrientedBranch":
        """View of this branch as seen from ``frm`` towards ``to``."""
        if (frm, to) == (self.i, self.j):
            return OrientedBranch(frm, to, self.g, self.b, self.g_si, self.b_si, self)
        if (frm, to) == (self.j, self.i):
            return OrientedBranch(frm, to, self.g, self.b, self.g_sj, self.b_sj, self)
        raise ValueError(f"({frm},{to}) does not match branch {self.i}-{self.j}")

    def current_coefficients(self, frm: int) -> tuple[float, float, float, float]:
        """Coefficient group (A, B, C, D) for current magnitude/angle seen
        from ``frm``: A=(g+gs)²+(b+bs)², B=g²+b², C=g(g+gs)+b(b+bs),
        D=g·bs−b·gs."""
        ob = self.oriented(frm, self.j if frm == self.i else self.i)
        g, b, gs, bs = ob.g, ob.b, ob.g_s, ob.b_s
        a = (g + gs) ** 2 + (b + bs) ** 2
        bb = g**2 + b**2
        c = g * (g + gs) + b * (b + bs)
        d = g * bs - b * gs
        return a, bb, c, d


@dataclass(frozen=True)
class OrientedBranch:
    """Branch parameters as seen from the ``frm`` end."""

    frm: int
    to: int
    g: float
    b: float
    g_s: float
    b_s: float
    branch: Branch


@dataclass(frozen=True)
class Grid:
    """Immutable network: buses (ids 1..N contiguous), branches, base power."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    _by_pair: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise CaseFormatError("bus ids must form a contiguous 1..N range")
        slacks = [b.id for b in self.buses if b.kind == SLACK]
        if len(slacks) != 1:
            raise CaseFormatError(f"expected exactly one slack bus, found {slacks}")
        pair_map = {}
        for k, br in enumerate(self.branches):
            if not (1 <= br.i <= len(ids) and 1 <= br.j <= len(ids)):
                raise CaseFormatError(f"branch {br.i}-{br.j} references unknown bus")
            pair_map.setdefault(frozenset((br.i, br.j)), []).append(k)
        object.__setattr__(self, "_by_pair", pair_map)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.kind == SLACK)

    def bus(self, bus_id: int) -> Bus:
        return self.buses[bus_id - 1]

    def branch_between(self, i: int, j: int) -> Branch:
        ks = self._by_pair.get(frozenset((i, j)), [])
        if not ks:
            raise KeyError(f"no branch between buses {i} and {j}")
        if len(ks) > 1:
            raise KeyError(f"ambiguous parallel branches between {i} and {j}")
        return self.branches[ks[0]]

    def neighbors(self, i: int) -> list[int]:
        """Buses adjacent to ``i``, ascending, without duplicates."""
        out = set()
        for br in self.branches:
            if br.i == i:
                out.add(br.j)
            elif br.j == i:
                out.add(br.i)
        return sorted(out)

    @property
    def admittance(self) -> np.ndarray:
        return admittance_matrix(self)


def admittance_matrix(grid: Grid) -> np.ndarray:
    """Nodal admittance matrix Y = G + jB (dense complex, structurally sparse).

    Diagonal i sums the incident series+shunt admittances plus the bus shunt;
    off-diagonal (i, j) is −y_ij.  Symmetric because phase shifters are
    excluded from the model.
    """
    n = grid.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in grid.branches:
        i, j = br.i - 1, br.j - 1
        ys = br.y_series
        y[i, i] += ys + br.shunt(br.i)
        y[j, j] += ys + br.shunt(br.j)
        y[i, j] -= ys
        y[j, i] -= ys
    for bus in grid.buses:
        y[bus.id - 1, bus.id - 1] += complex(bus.g_s, bus.b_s)
    return y


_SECTION_RE = re.compile(r"mpc\.(\w+)\s*=\s*(\[|[^;\[]+;)", re.S)


def _parse_matrix(text: str, start: int) -> tuple[list[list[float]], int]:
    end = text.index("];", start)
    body = "\n".join(line.split("%")[0] for line in text[start:end].splitlines())
    rows = []
    for chunk in body.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        rows.append([float(tok) for tok in chunk.replace(",", " ").split()])
    return rows, end


def parse_case(text: str) -> Grid:
    """Parse a MATPOWER-style case text into a :class:`Grid`.

    Recognized sections: ``mpc.baseMVA`` (scalar), ``mpc.bus``, ``mpc.gen``,
    ``mpc.branch`` (matrices).  Only the columns listed in the README are
    interpreted; extra columns are ignored.  Out-of-service branches
    (status 0) are dropped.
    """
    base_mva = 100.0
    bus_rows: list[list[float]] = []
    gen_rows: list[list[float]] = []
    branch_rows: list[list[float]] = []
    for m in _SECTION_RE.finditer(text):
        name = m.group(1)
        if m.group(2) == "[":
            rows, _ = _parse_matrix(text, m.end())
            if name == "bus":
                bus_rows = rows
            elif name == "gen":
                gen_rows = rows
            elif name == "branch":
                branch_rows = rows
        elif name == "baseMVA":
            base_mva = float(m.group(2).rstrip(";").strip())
    if not bus_rows:
        raise CaseFormatError("case has no mpc.bus section")

    gen_at: dict[int, list[float]] = {}
    for row in gen_rows:
        if len(row) > 7 and row[7] == 0.0:  # out-of-service generator
            continue
        gen_at[int(row[0])] = row

    buses = []
    seen = set()
    for row in bus_rows:
        if len(row) < 2:
            raise CaseFormatError(f"bus row too short: {row}")
        bid = int(row[0])
        if bid in seen:
            raise CaseFormatError(f"duplicate bus id {bid}")
        seen.add(bid)
        kind = _BUS_KIND.get(int(row[1]))
        if kind is None:
            raise CaseFormatError(f"bus {bid} has unknown type {row[1]}")
        pd = row[2] / base_mva if len(row) > 2 else 0.0
        qd = row[3] / base_mva if len(row) > 3 else 0.0
        gs = row[4] / base_mva if len(row) > 4 else 0.0
        bs = row[5] / base_mva if len(row) > 5 else 0.0
        gen = gen_at.get(bid)
        pg = gen[1] / base_mva if gen is not None else 0.0
        qg = gen[2] / base_mva if gen is not None and len(gen) > 2 else 0.0
        vset = gen[5] if gen is not None and len(gen) > 5 and gen[5] > 0 else (
            row[7] if len(row) > 7 and row[7] > 0 else 1.0)
        if kind != SLACK and gen is None and kind == GENERATOR:
            # generator bus without an in-service generator acts as a load bus
            kind = LOAD
        buses.append(Bus(bid, kind, gs, bs, pd, qd, pg, qg, vset))

    branches = []
    for row in branch_rows:
        if len(row) < 4:
            raise CaseFormatError(f"branch row too short: {row}")
        if len(row) > 10 and row[10] == 0.0:  # status column
            continue
        i, j = int(row[0]), int(row[1])
        r, x = row[2], row[3]
        b_chg = row[4] if len(row) > 4 else 0.0
        tap = row[8] if len(row) > 8 and row[8] != 0.0 else 1.0
        branches.append(_pi_branch(i, j, r, x, b_chg, tap))

    return Grid(tuple(buses), tuple(branches), base_mva)


def _pi_branch(i: int, j: int, r: float, x: float, b_chg: float, tap: float) -> Branch:
    """Equivalent pi-model branch for a line/transformer row.

    A tap ratio is absorbed exactly: series impedance scaled by the ratio and
    compensating shunts added at both ends; charging susceptance splits
    equally (scaled by 1/tap² on the tap side).
    """
    if x == 0.0:
        raise CaseFormatError(f"branch {i}-{j} has zero reactance")
    r_eff, x_eff = r * tap, x * tap
    y_eff = 1.0 / complex(r_eff, x_eff)
    sh_i = complex(0.0, b_chg / 2.0 / tap**2)
    sh_j = complex(0.0, b_chg / 2.0)
    if tap != 1.0:
        sh_i += y_eff * (1.0 - tap) / tap
        sh_j += y_eff * (tap - 1.0)
    return Branch(i, j, r_eff, x_eff,
                  sh_i.real, sh_i.imag, sh_j.real, sh_j.imag)
