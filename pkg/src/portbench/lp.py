"""Exact linear programming for the port-load makespan.

The throughput of an instruction that is limited only by port contention is
the smallest achievable maximum per-port load when each uop's work may be
split fractionally over the ports of its combination.  Replacing the
max in the objective with a variable ``z`` bounded below by every port's
load turns this into a plain LP:

    minimize    z
    subject to  sum_p f(p, pc)            = count(pc)   for each usage entry
                sum_pc f(p, pc) - z      <= 0           for each port p
                f(p, pc) = 0 for p not in pc,  all variables >= 0

Solved with a two-phase simplex over ``Fraction`` coefficients (Bland's
rule), so results like 1/3 are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction


class LPError(Exception):
    pass


@dataclass(frozen=True)
class LPInstance:
    """The port-load LP for one usage: entries are (port combination, count)."""

    ports: tuple[int, ...]
    entries: tuple[tuple[frozenset, int], ...]

    def __post_init__(self):
        for combo, count in self.entries:
            if not combo:
                raise LPError("empty port combination")
            if not combo <= set(self.ports):
                raise LPError(f"combination {sorted(combo)} uses unknown ports")
            if count <= 0:
                raise LPError("usage counts must be positive")

    def variables(self):
        """(entry index, port) pairs for the f variables, in column order."""
        return [
            (e_idx, p)
            for e_idx, (combo, _) in enumerate(self.entries)
            for p in sorted(combo)
        ]


def _pivot(rows, basis, pivot_row, pivot_col):
    prow = rows[pivot_row]
    inv = Fraction(1) / prow[pivot_col]
    rows[pivot_row] = [v * inv for v in prow]
    prow = rows[pivot_row]
    for i, row in enumerate(rows):
        if i == pivot_row:
            continue
        factor = row[pivot_col]
        if factor:
            rows[i] = [v - factor * pv for v, pv in zip(row, prow)]
    basis[pivot_row] = pivot_col


def solve(instance: LPInstance) -> Fraction:
    """Exact optimum of the port-load LP (0 for an empty usage)."""
    if not instance.entries:
        return Fraction(0)
    f_vars = instance.variables()
    n_f = len(f_vars)
    z_col = n_f
    n_ports = len(instance.ports)
    n_entries = len(instance.entries)
    slack0 = n_f + 1
    art0 = slack0 + n_ports
    width = art0 + n_entries + 1  # + rhs
    col_of = {fp: j for j, fp in enumerate(f_vars)}

    rows = []
    basis = []
    for p_idx, port in enumerate(instance.ports):
        row = [Fraction(0)] * width
        for e_idx, (combo, _) in enumerate(instance.entries):
            if port in combo:
                row[col_of[(e_idx, port)]] = Fraction(1)
        row[z_col] = Fraction(-1)
        row[slack0 + p_idx] = Fraction(1)
        rows.append(row)
        basis.append(slack0 + p_idx)
    for e_idx, (combo, count) in enumerate(instance.entries):
        row = [Fraction(0)] * width
        for p in combo:
            row[col_of[(e_idx, p)]] = Fraction(1)
        row[art0 + e_idx] = Fraction(1)
        row[-1] = Fraction(count)
        rows.append(row)
        basis.append(art0 + e_idx)

    # phase 1: minimize the artificials (reduced against the initial basis)
    phase1 = [Fraction(0)] * width
    for e_row in rows[n_ports:]:
        for j in range(width):
            phase1[j] -= e_row[j]
    for j in range(art0, art0 + n_entries):
        phase1[j] += Fraction(1)
    # phase-2 costs (just z) are kept in lockstep through both phases
    phase2 = [Fraction(0)] * width
    phase2[z_col] = Fraction(1)

    all_cols = list(range(width - 1))

    def run(objective, cols):
        while True:
            enter = None
            for j in cols:
                if objective[j] < 0:
                    enter = j
                    break
            if enter is None:
                return
            leave = None
            best = None
            for i, row in enumerate(rows):
                coeff = row[enter]
                if coeff > 0:
                    ratio = row[-1] / coeff
                    if (
                        best is None
                        or ratio < best
                        or (ratio == best and basis[i] < basis[leave])
                    ):
                        best = ratio
                        leave = i
            if leave is None:
                raise LPError("unbounded LP (malformed usage)")
            _pivot(rows, basis, leave, enter)
            for obj in (phase1, phase2):
                factor = obj[enter]
                if factor:
                    prow = rows[leave]
                    for j in range(width):
                        obj[j] -= factor * prow[j]

    run(phase1, all_cols)
    if -phase1[-1] != 0:
        raise LPError("infeasible LP (malformed usage)")
    # keep artificials out of the running in phase 2
    non_artificial = list(range(art0))
    run(phase2, non_artificial)
    return -phase2[-1]
