"""Simplicial cochain complexes for the reference triangulations.

Independent ground truth for the cohomology of the builtin manifolds:
Betti numbers come from exact integer ranks of the coboundary matrices,
entirely separate from any flow or quadrature machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

__all__ = [
    "SimplicialComplex",
    "triangle_circle",
    "octahedron_sphere",
    "grid_torus",
    "simplicial_oracle",
    "bareiss_rank",
]


def bareiss_rank(matrix: list[list[int]]) -> int:
    """Rank over the rationals by fraction-free (Bareiss) elimination.

    Entries stay integers throughout; exact for any integer input.
    """
    M = [list(map(int, row)) for row in matrix]
    if not M or not M[0]:
        return 0
    rows, cols = len(M), len(M[0])
    rank = 0
    prev = 1
    r = 0
    for c in range(cols):
        pivot = next((i for i in range(r, rows) if M[i][c] != 0), None)
        if pivot is None:
            continue
        M[r], M[pivot] = M[pivot], M[r]
        for i in range(r + 1, rows):
            for j in range(c + 1, cols):
                M[i][j] = (M[r][c] * M[i][j] - M[i][c] * M[r][j]) // prev
            M[i][c] = 0
        prev = M[r][c]
        r += 1
        rank += 1
        if r == rows:
            break
    return rank


@dataclass
class SimplicialComplex:
    name: str
    simplices: list[list[tuple[int, ...]]]   # per dimension, sorted vertex tuples

    def coboundary(self, r: int) -> list[list[int]]:
        """delta_r as an integer matrix (rows: (r+1)-simplices, cols: r-simplices)."""
        if r + 1 >= len(self.simplices):
            return []
        lows = {s: j for j, s in enumerate(self.simplices[r])}
        out = []
        for high in self.simplices[r + 1]:
            row = [0] * len(self.simplices[r])
            for drop in range(len(high)):
                face = high[:drop] + high[drop + 1:]
                row[lows[face]] += (-1) ** drop
            out.append(row)
        return out

    def check_complex(self) -> None:
        """Boundary-of-boundary must vanish; otherwise the input is not a complex."""
        for r in range(len(self.simplices) - 2):
            d0 = self.coboundary(r)
            d1 = self.coboundary(r + 1)
            for row1 in d1:
                for j in range(len(d0[0]) if d0 else 0):
                    s = sum(row1[k] * d0[k][j] for k in range(len(d0)))
                    if s != 0:
                        raise ValueError(f"{self.name}: coboundary squared is nonzero")

    def betti_numbers(self) -> tuple[int, ...]:
        self.check_complex()
        out = []
        for r in range(len(self.simplices)):
            dim = len(self.simplices[r])
            rk_up = bareiss_rank(self.coboundary(r))
            rk_down = bareiss_rank(self.coboundary(r - 1)) if r > 0 else 0
            out.append(dim - rk_up - rk_down)
        return tuple(out)


def _close(name, verts, faces) -> SimplicialComplex:
    """Complex from top faces: all lower simplices are generated."""
    top = sorted({tuple(sorted(f)) for f in faces})
    dim = len(top[0]) - 1
    levels: list[set] = [set() for _ in range(dim + 1)]
    levels[dim] = set(top)
    for d in range(dim, 0, -1):
        for s in levels[d]:
            for face in combinations(s, d):
                levels[d - 1].add(tuple(face))
    assert levels[0] == {(v,) for v in verts}, f"{name}: isolated vertices"
    return SimplicialComplex(name=name, simplices=[sorted(l) for l in levels])


def triangle_circle() -> SimplicialComplex:
    return _close("triangle_circle", range(3), [(0, 1), (1, 2), (0, 2)])


def octahedron_sphere() -> SimplicialComplex:
    # vertices 0..5 = +x -x +y -y +z -z; faces pick one from each axis pair
    faces = []
    for a in (0, 1):
        for b in (2, 3):
            for c in (4, 5):
                faces.append((a, b, c))
    return _close("octahedron_sphere", range(6), faces)


def grid_torus() -> SimplicialComplex:
    """3 x 3 vertex grid on the torus, diagonal subdivision: 9 / 27 / 18."""
    def v(i, j):
        return (i % 3) * 3 + (j % 3)

    faces = []
    for i in range(3):
        for j in range(3):
            faces.append((v(i, j), v(i + 1, j), v(i + 1, j + 1)))
            faces.append((v(i, j), v(i, j + 1), v(i + 1, j + 1)))
    return _close("grid_torus", range(9), faces)


_ORACLES = {
    1: triangle_circle,
    "circle": triangle_circle,
    "sphere": octahedron_sphere,
    "torus": grid_torus,
}


def simplicial_oracle(manifold: str) -> tuple[int, ...]:
    """Betti numbers of 'circle', 'sphere', or 'torus' by exact rank."""
    try:
        return _ORACLES[manifold]().betti_numbers()
    except KeyError:
        raise ValueError(f"no reference triangulation for {manifold!r}") from None


def oracle_for_scenario(scenario_name: str) -> tuple[int, ...]:
    if "circle" in scenario_name:
        return simplicial_oracle("circle")
    if "sphere" in scenario_name:
        return simplicial_oracle("sphere")
    if "torus" in scenario_name:
        return simplicial_oracle("torus")
    raise ValueError(f"cannot infer the manifold of scenario {scenario_name!r}")
