"""The Morse cochain complex over exact integers.

Incidence matrices collect the signed instanton counts between rest
points one index apart; the coboundary squares to zero exactly, and
ranks (hence Betti numbers) are computed fraction-free.  Floating point
never enters here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .critical import OrientationSet, RestPoint
from .simplicial import bareiss_rank

__all__ = [
    "MorseComplex",
    "CohomologyReport",
    "ComplexError",
    "build_complex",
    "verify_delta_squared",
    "betti_numbers",
    "morse_inequalities",
]


class ComplexError(RuntimeError):
    pass


@dataclass
class MorseComplex:
    bases: dict[int, list[str]]                 # degree -> ordered rest point ids
    incidence: dict[int, list[list[int]]]       # r -> matrix (X_r rows, X_{r-1} cols)
    top_degree: int

    def basis(self, r: int) -> list[str]:
        return self.bases.get(r, [])

    def delta_matrix(self, r: int) -> list[list[int]]:
        """Matrix of the coboundary C^r -> C^{r+1}: rows X_{r+1}, cols X_r."""
        return self.incidence.get(r + 1, [])

    def delta(self, r: int, cochain: np.ndarray) -> np.ndarray:
        mat = self.delta_matrix(r)
        if not mat:
            return np.zeros(len(self.basis(r + 1)))
        return np.asarray(mat, dtype=float) @ np.asarray(cochain, dtype=float)

    def counts(self) -> tuple[int, ...]:
        return tuple(len(self.basis(r)) for r in range(self.top_degree + 1))


@dataclass
class CohomologyReport:
    betti: tuple[int, ...]
    counts: tuple[int, ...]
    weak_inequalities: bool
    euler_equality: bool
    euler_flow: int
    euler_betti: int
    strict_inequality_failures: list[int] = field(default_factory=list)


def build_complex(rest_points: list[RestPoint], instantons: dict,
                  orientations: OrientationSet, dim: int) -> MorseComplex:
    """Assemble the incidence matrices from enumerated instantons.

    ``instantons`` maps (src_id, dst_id) over all gap-1 pairs to lists of
    Instanton records; a missing adjacent pair is a hard error (the complex
    would silently be wrong).
    """
    bases = {r: [rp.id for rp in rest_points if rp.index == r]
             for r in range(dim + 1)}
    by_id = {rp.id: rp for rp in rest_points}
    for x in rest_points:
        for y in rest_points:
            if x.index - y.index == 1 and (x.id, y.id) not in instantons:
                raise ComplexError(f"missing instanton enumeration for "
                                   f"{x.id} -> {y.id}")
    incidence: dict[int, list[list[int]]] = {}
    for r in range(1, dim + 1):
        rows = []
        for xid in bases[r]:
            row = []
            for yid in bases[r - 1]:
                entries = instantons.get((xid, yid), [])
                row.append(sum(inst.effective_sign(orientations) for inst in entries))
            rows.append(row)
        incidence[r] = rows
    return MorseComplex(bases=bases, incidence=incidence, top_degree=dim)


def verify_delta_squared(complex_: MorseComplex):
    """Exact integer check of delta . delta = 0; returns (ok, witnesses)."""
    witnesses = []
    for r in range(1, complex_.top_degree):
        upper = complex_.incidence.get(r + 1, [])
        lower = complex_.incidence.get(r, [])
        if not upper or not lower:
            continue
        for i, xid in enumerate(complex_.basis(r + 1)):
            for k, zid in enumerate(complex_.basis(r - 1)):
                total = sum(upper[i][j] * lower[j][k]
                            for j in range(len(complex_.basis(r))))
                if total != 0:
                    chains = [(xid, yid, zid, upper[i][j], lower[j][k])
                              for j, yid in enumerate(complex_.basis(r))
                              if upper[i][j] * lower[j][k] != 0]
                    witnesses.append({"pair": (xid, zid), "value": total,
                                      "two_step_chains": chains})
    return len(witnesses) == 0, witnesses


def betti_numbers(complex_: MorseComplex) -> tuple[int, ...]:
    ok, witnesses = verify_delta_squared(complex_)
    if not ok:
        raise ComplexError(f"coboundary does not square to zero: {witnesses[:3]}")
    out = []
    for r in range(complex_.top_degree + 1):
        dim_r = len(complex_.basis(r))
        rk_up = bareiss_rank(complex_.delta_matrix(r))
        rk_down = bareiss_rank(complex_.delta_matrix(r - 1)) if r > 0 else 0
        out.append(dim_r - rk_up - rk_down)
    return tuple(out)


def morse_inequalities(complex_: MorseComplex,
                       betti: tuple[int, ...] | None = None) -> CohomologyReport:
    """b_r <= #X_r in every degree plus the alternating-sum equality.

    The count bound is implemented as non-strict: perfect potentials (the
    flat torus) realize equality, so a strict reading is unsatisfiable;
    degrees where equality holds are surfaced separately.
    """
    if betti is None:
        betti = betti_numbers(complex_)
    counts = complex_.counts()
    weak = all(b <= c for b, c in zip(betti, counts))
    equal_degrees = [r for r, (b, c) in enumerate(zip(betti, counts)) if b == c]
    euler_flow = sum((-1) ** r * c for r, c in enumerate(counts))
    euler_betti = sum((-1) ** r * b for r, b in enumerate(betti))
    return CohomologyReport(
        betti=betti, counts=counts, weak_inequalities=weak,
        euler_equality=euler_flow == euler_betti,
        euler_flow=euler_flow, euler_betti=euler_betti,
        strict_inequality_failures=equal_degrees)
