"""Charts, atlases, and the scenario container.

A scenario holds the closed manifold as an atlas of axis-aligned boxes
(axes either bounded-open or periodic), a per-chart metric, the vector
field, the Lyapunov potential, and a library of differential forms.
All analytic data is Expression-valued; everything here is immutable
after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .expressions import Expression, compile_matrix, compile_vector
from .forms import DifferentialForm

__all__ = [
    "Axis",
    "Transition",
    "Chart",
    "Scenario",
    "GroundTruth",
    "ScenarioError",
    "LyapunovReport",
    "check_lyapunov",
    "consistency_report",
]


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Axis:
    kind: str  # "periodic" | "bounded"
    lo: float
    hi: float

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class Transition:
    target: str
    guard: Expression            # overlap iff guard > 0 and image lies in target box
    forward: tuple[Expression, ...]
    inverse: tuple[Expression, ...]


@dataclass(frozen=True)
class Chart:
    id: str
    axes: tuple[Axis, ...]
    transitions: tuple[Transition, ...] = ()

    @property
    def dim(self) -> int:
        return len(self.axes)

    def wrap(self, points: np.ndarray) -> np.ndarray:
        """Reduce periodic coordinates to their fundamental interval."""
        pts = np.array(points, dtype=float)
        for i, ax in enumerate(self.axes):
            if ax.kind == "periodic":
                pts[..., i] = ax.lo + np.mod(pts[..., i] - ax.lo, ax.length)
        return pts

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        ok = np.ones(pts.shape[:-1], dtype=bool)
        for i, ax in enumerate(self.axes):
            if ax.kind == "bounded":
                ok &= (pts[..., i] > ax.lo + margin) & (pts[..., i] < ax.hi - margin)
        return ok

    def inner_box_margin(self, points: np.ndarray, shrink: float = 0.9) -> np.ndarray:
        """Positive once a point leaves the ``shrink`` inner box (handoff cue).

        Periodic axes have no boundary and never contribute.
        """
        pts = np.asarray(points, dtype=float)
        worst = np.full(pts.shape[:-1], -np.inf)
        for i, ax in enumerate(self.axes):
            if ax.kind == "bounded":
                center = 0.5 * (ax.lo + ax.hi)
                half = 0.5 * ax.length * shrink
                worst = np.maximum(worst, np.abs(pts[..., i] - center) - half)
        return worst

    def delta(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Coordinate difference a - b with minimal image on periodic axes."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        for i, ax in enumerate(self.axes):
            if ax.kind == "periodic":
                d[..., i] = d[..., i] - ax.length * np.round(d[..., i] / ax.length)
        return d

    def distance(self, a, b) -> np.ndarray:
        return np.linalg.norm(self.delta(a, b), axis=-1)

    def sample(self, rng: np.random.Generator, count: int, margin_frac: float = 0.05) -> np.ndarray:
        cols = []
        for ax in self.axes:
            if ax.kind == "periodic":
                cols.append(rng.uniform(ax.lo, ax.hi, count))
            else:
                pad = margin_frac * ax.length
                cols.append(rng.uniform(ax.lo + pad, ax.hi - pad, count))
        return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class GroundTruth:
    rest_points: tuple[int, ...] | None = None        # count per index
    betti: tuple[int, ...] | None = None
    instantons_per_pair: int | None = None            # per adjacent gap-1 pair


@dataclass
class Scenario:
    name: str
    dim: int
    charts: tuple[Chart, ...]
    metric: dict[str, tuple[tuple[Expression, ...], ...]]
    vector_field: dict[str, tuple[Expression, ...]]
    lyapunov: dict[str, Expression]
    forms: dict[str, DifferentialForm] = field(default_factory=dict)
    ground_truth: GroundTruth | None = None

    def __post_init__(self):
        self._chart_index = {c.id: c for c in self.charts}
        self._cache: dict = {}

    def chart(self, chart_id: str) -> Chart:
        try:
            return self._chart_index[chart_id]
        except KeyError:
            raise ScenarioError(f"unknown chart {chart_id!r}") from None

    # -- compiled analytic caches -------------------------------------------

    def x_fn(self, chart_id: str):
        key = ("X", chart_id)
        if key not in self._cache:
            self._cache[key] = compile_vector(self.vector_field[chart_id], self.dim)
        return self._cache[key]

    def f_fn(self, chart_id: str):
        key = ("f", chart_id)
        if key not in self._cache:
            self._cache[key] = self.lyapunov[chart_id].compiled()
        return self._cache[key]

    def df_exprs(self, chart_id: str) -> tuple[Expression, ...]:
        key = ("df", chart_id)
        if key not in self._cache:
            self._cache[key] = self.lyapunov[chart_id].gradient(self.dim)
        return self._cache[key]

    def df_fn(self, chart_id: str):
        key = ("dfv", chart_id)
        if key not in self._cache:
            self._cache[key] = compile_vector(self.df_exprs(chart_id), self.dim)
        return self._cache[key]

    def dx_exprs(self, chart_id: str) -> tuple[tuple[Expression, ...], ...]:
        """Symbolic Jacobian of the vector field, row i = d X_i / d t_j."""
        key = ("DX", chart_id)
        if key not in self._cache:
            comps = self.vector_field[chart_id]
            self._cache[key] = tuple(tuple(c.diff(j) for j in range(self.dim)) for c in comps)
        return self._cache[key]

    def dx_fn(self, chart_id: str):
        key = ("DXv", chart_id)
        if key not in self._cache:
            self._cache[key] = compile_matrix(self.dx_exprs(chart_id), self.dim)
        return self._cache[key]

    def metric_fn(self, chart_id: str):
        key = ("g", chart_id)
        if key not in self._cache:
            self._cache[key] = compile_matrix(self.metric[chart_id], self.dim)
        return self._cache[key]

    def transition_fn(self, chart_id: str, tr: Transition):
        key = ("tr", chart_id, tr.target, tr.forward)
        if key not in self._cache:
            self._cache[key] = compile_vector(tr.forward, self.dim)
        return self._cache[key]

    def transition_jac_fn(self, chart_id: str, tr: Transition):
        key = ("trJ", chart_id, tr.target, tr.forward)
        if key not in self._cache:
            rows = tuple(tuple(c.diff(j) for j in range(self.dim)) for c in tr.forward)
            self._cache[key] = compile_matrix(rows, self.dim)
        return self._cache[key]

    def df_of_x_fn(self, chart_id: str):
        """Compiled df(X), strictly negative away from rest points."""
        key = ("dfX", chart_id)
        if key not in self._cache:
            acc = None
            for dfe, xe in zip(self.df_exprs(chart_id), self.vector_field[chart_id]):
                term = dfe * xe
                acc = term if acc is None else acc + term
            self._cache[key] = acc.compiled()
        return self._cache[key]

    # -- transitions ----------------------------------------------------------

    def transit(self, chart_id: str, points: np.ndarray, target: str | None = None):
        """Map points to an overlapping chart.

        Returns (target_chart_id, mapped_points, valid_mask).  With no
        explicit target the first applicable transition wins.
        """
        chart = self.chart(chart_id)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        for tr in chart.transitions:
            if target is not None and tr.target != target:
                continue
            guard = tr.guard.compiled()(pts) > 0.0
            mapped = self.transition_fn(chart_id, tr)(pts)
            tgt_chart = self.chart(tr.target)
            ok = guard & tgt_chart.contains(mapped)
            if target is not None or bool(np.all(ok)):
                return tr.target, tgt_chart.wrap(mapped), ok
        return None, pts, np.zeros(pts.shape[:-1], dtype=bool)

    def locate(self, chart_id: str, point: np.ndarray, other_chart: str):
        """Coordinates of a point in ``other_chart`` when reachable, else None."""
        if chart_id == other_chart:
            return np.asarray(point, dtype=float)
        tgt, mapped, ok = self.transit(chart_id, np.atleast_2d(point), target=other_chart)
        if tgt == other_chart and bool(ok[0]):
            return mapped[0]
        return None


# ---------------------------------------------------------------------------
# Sampled certification checks.


@dataclass
class LyapunovReport:
    passed: bool
    samples: int
    worst_margin: float         # max of df(X) outside exclusion balls; pass iff < 0
    failures: int
    excluded: int

    def __bool__(self) -> bool:
        return self.passed


def check_lyapunov(scenario: Scenario, samples: int = 10_000, exclusion_radius: float = 1e-3,
                   rest_points=None, seed: int = 7) -> LyapunovReport:
    """Certify df(X) < 0 away from rest points by dense sampling.

    Rest points may be passed in; otherwise approximate zeros of X from a
    coarse scan are excluded.  A single bad sample rejects the scenario.
    """
    rng = np.random.default_rng(seed)
    per_chart = max(1, samples // len(scenario.charts))
    worst = -np.inf
    failures = 0
    excluded = 0
    total = 0
    for chart in scenario.charts:
        pts = chart.sample(rng, per_chart)
        total += len(pts)
        dfx = scenario.df_of_x_fn(chart.id)(pts)
        near = np.zeros(len(pts), dtype=bool)
        centers = _exclusion_centers(scenario, chart, rest_points)
        for c in centers:
            near |= chart.distance(pts, c) < exclusion_radius
        excluded += int(near.sum())
        outside = dfx[~near]
        if outside.size:
            worst = max(worst, float(outside.max()))
            failures += int((outside >= 0.0).sum())
    return LyapunovReport(passed=failures == 0, samples=total, worst_margin=worst,
                          failures=failures, excluded=excluded)


def _exclusion_centers(scenario: Scenario, chart: Chart, rest_points) -> list[np.ndarray]:
    if rest_points is not None:
        out = []
        for rp in rest_points:
            coords = rp.coords_by_chart.get(chart.id)
            if coords is not None:
                out.append(np.asarray(coords))
        return out
    # coarse scan for approximate zeros of |X|
    n = chart.dim
    axes = [np.linspace(ax.lo, ax.hi, 48, endpoint=False) if ax.kind == "periodic"
            else np.linspace(ax.lo + 0.02 * ax.length, ax.hi - 0.02 * ax.length, 48)
            for ax in chart.axes]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    speed = np.linalg.norm(scenario.x_fn(chart.id)(grid), axis=-1)
    cut = max(1e-6, float(np.percentile(speed, 2.0)))
    return [grid[i] for i in np.nonzero(speed <= cut)[0]]


@dataclass
class ConsistencyReport:
    passed: bool
    checks: dict[str, float]    # worst residual per named check

    def __bool__(self) -> bool:
        return self.passed


def consistency_report(scenario: Scenario, samples: int = 1000, seed: int = 11,
                       tol: float = 1e-9) -> ConsistencyReport:
    """Sampled atlas coherence: transition round trips, Jacobian sign,
    field/potential/metric/form compatibility on overlaps, SPD metric."""
    rng = np.random.default_rng(seed)
    checks: dict[str, float] = {}

    def record(name, value):
        checks[name] = max(checks.get(name, 0.0), float(value))

    for chart in scenario.charts:
        pts = chart.sample(rng, samples)
        g = scenario.metric_fn(chart.id)(pts)
        eigs = np.linalg.eigvalsh(0.5 * (g + np.swapaxes(g, -1, -2)))
        record("metric_min_eigenvalue_deficit", max(0.0, 1e-9 - float(eigs.min())))
        record("metric_asymmetry", float(np.abs(g - np.swapaxes(g, -1, -2)).max()))

        for tr in chart.transitions:
            guard = tr.guard.compiled()(pts) > 0.0
            tgt = scenario.chart(tr.target)
            fwd = scenario.transition_fn(chart.id, tr)(pts)
            ok = guard & tgt.contains(fwd)
            if not ok.any():
                continue
            sub = pts[ok]
            image = fwd[ok]
            back = compile_vector(tr.inverse, scenario.dim)(image)
            record("transition_roundtrip", float(chart.distance(back, sub).max()))

            jac = scenario.transition_jac_fn(chart.id, tr)(sub)
            dets = np.linalg.det(jac)
            record("transition_jacobian_min_abs_det", max(0.0, 1e-12 - float(np.abs(dets).min())))
            signs = np.sign(dets)
            record("transition_jacobian_sign_spread", float(signs.max() - signs.min()))

            # scalar, field, metric compatibility
            f_here = scenario.f_fn(chart.id)(sub)
            f_there = scenario.f_fn(tr.target)(image)
            record("lyapunov_chart_mismatch", float(np.abs(f_here - f_there).max()))

            x_here = scenario.x_fn(chart.id)(sub)
            x_there = scenario.x_fn(tr.target)(image)
            pushed = np.einsum("pij,pj->pi", jac, x_here)
            scale = 1.0 + np.abs(x_there).max()
            record("vector_field_chart_mismatch", float(np.abs(pushed - x_there).max()) / scale)

            g_here = scenario.metric_fn(chart.id)(sub)
            g_there = scenario.metric_fn(tr.target)(image)
            pulled = np.einsum("pki,pkl,plj->pij", jac, g_there, jac)
            record("metric_chart_mismatch", float(np.abs(pulled - g_here).max()))

            for form in scenario.forms.values():
                mismatch = form.pullback_mismatch(scenario, chart.id, tr, sub, image, jac)
                if mismatch is not None:
                    record(f"form_{form.name}_chart_mismatch", mismatch)

        for form in scenario.forms.values():
            if form.closed:
                record(f"form_{form.name}_closedness",
                       form.closedness_residual(scenario, chart.id, pts))

    gate = {
        "metric_min_eigenvalue_deficit": 0.0,
        "metric_asymmetry": tol,
        "transition_roundtrip": tol,
        "transition_jacobian_min_abs_det": 0.0,
        "transition_jacobian_sign_spread": 0.0,
        "lyapunov_chart_mismatch": tol,
        "vector_field_chart_mismatch": tol,
        "metric_chart_mismatch": 1e-8,
    }
    passed = True
    for name, value in checks.items():
        limit = gate.get(name, tol)
        if name.startswith("form_"):
            limit = tol
        if value > limit:
            passed = False
    return ConsistencyReport(passed=passed, checks=checks)
