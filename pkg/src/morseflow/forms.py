"""Differential forms stored per chart as coefficient expressions.

A degree-r form keeps one Expression per strictly increasing multi-index
of size r, per chart.  Wedge products and exterior derivatives are exact
AST-level operations; chart compatibility and closedness are checked
numerically at sampled points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .expressions import Expression, ZERO_EXPR

__all__ = ["DifferentialForm", "FormDegreeError", "wedge", "exterior_derivative"]


class FormDegreeError(ValueError):
    pass


def _merge_sign(I: tuple[int, ...], J: tuple[int, ...]):
    """Sorted concatenation of disjoint multi-indices and its shuffle sign."""
    merged = list(I)
    sign = 1
    for j in J:
        pos = len(merged)
        while pos > 0 and merged[pos - 1] > j:
            pos -= 1
        sign *= (-1) ** (len(merged) - pos)
        merged.insert(pos, j)
    return tuple(merged), sign


@dataclass
class DifferentialForm:
    name: str
    degree: int
    dim: int
    coefficients: dict[str, dict[tuple[int, ...], Expression]]
    closed: bool = False
    _fns: dict = field(default_factory=dict, repr=False, compare=False)

    def coeff(self, chart_id: str, index: tuple[int, ...]) -> Expression:
        return self.coefficients.get(chart_id, {}).get(tuple(index), ZERO_EXPR)

    def indices(self) -> list[tuple[int, ...]]:
        return list(combinations(range(self.dim), self.degree))

    def coeff_fn(self, chart_id: str, index: tuple[int, ...]):
        key = (chart_id, tuple(index))
        if key not in self._fns:
            self._fns[key] = self.coeff(chart_id, index).compiled()
        return self._fns[key]

    def is_zero(self) -> bool:
        return all(ex.is_zero() for per in self.coefficients.values() for ex in per.values())

    # -- evaluation -----------------------------------------------------------

    def evaluate(self, chart_id: str, points: np.ndarray, vectors) -> np.ndarray:
        """Apply the form to ``degree`` vector fields sampled at ``points``.

        vectors: sequence of arrays shaped like points; returns (...,).
        """
        pts = np.asarray(points, dtype=float)
        if self.degree == 0:
            return self.coeff_fn(chart_id, ())(pts)
        vecs = [np.asarray(v, dtype=float) for v in vectors]
        if len(vecs) != self.degree:
            raise FormDegreeError(f"{self.name}: needs {self.degree} vectors, got {len(vecs)}")
        out = np.zeros(pts.shape[:-1])
        for I in self.indices():
            a = self.coeff(chart_id, I)
            if a.is_zero():
                continue
            block = np.stack([np.stack([v[..., i] for i in I], axis=-1) for v in vecs], axis=-2)
            out += self.coeff_fn(chart_id, I)(pts) * np.linalg.det(block)
        return out

    # -- chart checks ---------------------------------------------------------

    def pullback_mismatch(self, scenario, chart_id, transition, pts, image, jac):
        """Worst deviation of stored coefficients from the transition pullback."""
        if transition.target not in self.coefficients and chart_id not in self.coefficients:
            return None
        worst = 0.0
        for I in self.indices():
            stored = self.coeff_fn(chart_id, I)(pts)
            pulled = np.zeros_like(stored)
            for J in self.indices():
                b = self.coeff(transition.target, J)
                if b.is_zero():
                    continue
                if self.degree == 0:
                    minor = np.ones(pts.shape[:-1])
                else:
                    sub = jac[..., list(J), :][..., :, list(I)]
                    minor = np.linalg.det(sub)
                pulled += self.coeff_fn(transition.target, J)(image) * minor
            worst = max(worst, float(np.abs(stored - pulled).max()))
        return worst

    def closedness_residual(self, scenario, chart_id, pts) -> float:
        if self.degree >= self.dim:
            return 0.0  # top-degree forms are closed for dimension reasons
        d = exterior_derivative(self)
        worst = 0.0
        for I in d.indices():
            ex = d.coeff(chart_id, I)
            if ex.is_zero():
                continue
            worst = max(worst, float(np.abs(ex.compiled()(pts)).max()))
        return worst


def exterior_derivative(form: DifferentialForm) -> DifferentialForm:
    """d of a form; raises FormDegreeError on top-degree input."""
    if form.degree >= form.dim:
        raise FormDegreeError(
            f"cannot take exterior derivative of a degree-{form.degree} form on a "
            f"{form.dim}-dimensional manifold")
    out: dict[str, dict[tuple[int, ...], Expression]] = {}
    for chart_id, per in form.coefficients.items():
        acc: dict[tuple[int, ...], Expression] = {}
        for I, a in per.items():
            if a.is_zero():
                continue
            for j in range(form.dim):
                if j in I:
                    continue
                K, sign = _merge_sign((j,), I)
                term = a.diff(j)
                if term.is_zero():
                    continue
                if sign < 0:
                    term = -term
                acc[K] = acc[K] + term if K in acc else term
        out[chart_id] = acc
    return DifferentialForm(name=f"d({form.name})", degree=form.degree + 1, dim=form.dim,
                            coefficients=out, closed=True)


def wedge(a: DifferentialForm, b: DifferentialForm) -> DifferentialForm:
    """Wedge product with shuffle signs; degrees must fit inside the manifold."""
    if a.degree + b.degree > a.dim:
        raise FormDegreeError(
            f"wedge degree overflow: {a.degree} + {b.degree} > {a.dim}")
    charts = set(a.coefficients) | set(b.coefficients)
    out: dict[str, dict[tuple[int, ...], Expression]] = {}
    for chart_id in charts:
        acc: dict[tuple[int, ...], Expression] = {}
        for I, ca in a.coefficients.get(chart_id, {}).items():
            if ca.is_zero():
                continue
            for J, cb in b.coefficients.get(chart_id, {}).items():
                if cb.is_zero() or set(I) & set(J):
                    continue
                K, sign = _merge_sign(I, J)
                term = ca * cb
                if sign < 0:
                    term = -term
                acc[K] = acc[K] + term if K in acc else term
        out[chart_id] = acc
    return DifferentialForm(name=f"({a.name})^({b.name})", degree=a.degree + b.degree,
                            dim=a.dim, coefficients=out, closed=a.closed and b.closed)
