"""Rest points: location by grid-seeded damped Newton, hyperbolicity
certification, index from the linearization spectrum, and the
deterministic orientation frames.

Index convention: i(x) counts eigenvalues of DX with positive real part,
which is the dimension of the set flowing out of x; for X = -grad f this
is the classical Morse index of f.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenario import Scenario

__all__ = [
    "RestPoint",
    "OrientationSet",
    "NonHyperbolicError",
    "NewtonFailure",
    "DiskRadiusError",
    "find_rest_points",
    "linearize_and_index",
    "choose_orientations",
    "unstable_disk",
    "unstable_sphere_seeds",
    "capture_radius_for",
]

HYPERBOLICITY_MARGIN = 1e-6
NEWTON_RESIDUAL = 1e-12
DEDUP_DISTANCE = 1e-6


class NonHyperbolicError(RuntimeError):
    pass


class NewtonFailure(RuntimeError):
    pass


class DiskRadiusError(ValueError):
    pass


@dataclass
class RestPoint:
    id: str
    chart_id: str
    coords: np.ndarray
    coords_by_chart: dict[str, np.ndarray]
    f: float
    DX: np.ndarray
    eigenvalues: np.ndarray
    index: int
    unstable_frame: np.ndarray     # (n, index), columns ordered and sign-normalized
    stable_frame: np.ndarray       # (n, n - index)
    residual: float
    min_abs_re: float
    max_abs_re: float

    def frames_in(self, scenario: Scenario, chart_id: str):
        """(unstable, stable) frames pushed into another chart's coordinates."""
        if chart_id == self.chart_id:
            return self.unstable_frame, self.stable_frame
        chart = scenario.chart(self.chart_id)
        for tr in chart.transitions:
            if tr.target != chart_id:
                continue
            J = scenario.transition_jac_fn(self.chart_id, tr)(self.coords[None, :])[0]
            return J @ self.unstable_frame, J @ self.stable_frame
        raise KeyError(f"{self.id} has no transition into chart {chart_id}")


@dataclass
class OrientationSet:
    """Orientation choices: the frames live on the rest points; a flip is a
    sign flag.  Index-0 points carry a bare sign (orientation of a point)."""
    flags: dict[str, int]

    def flag(self, rp_id: str) -> int:
        return self.flags.get(rp_id, 1)

    def flipped(self, rp_ids) -> "OrientationSet":
        flags = dict(self.flags)
        for rp_id in rp_ids:
            flags[rp_id] = -flags.get(rp_id, 1)
        return OrientationSet(flags)

    @staticmethod
    def random(rest_points, seed: int) -> "OrientationSet":
        rng = np.random.default_rng(seed)
        return OrientationSet({rp.id: int(rng.choice([-1, 1])) for rp in rest_points})


def _sign_normalize(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    v = v / np.linalg.norm(v)
    for comp in v:
        if abs(comp) > tol:
            return v if comp > 0 else -v
    return v


def _eigen_frames(DX: np.ndarray):
    """Certified spectrum split into sorted, sign-normalized frames."""
    eigvals, eigvecs = np.linalg.eig(DX)
    order = np.argsort(-eigvals.real, kind="stable")
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    min_re = float(np.abs(eigvals.real).min())
    if min_re <= HYPERBOLICITY_MARGIN:
        raise NonHyperbolicError(
            f"eigenvalue with |Re| = {min_re:.3e} <= {HYPERBOLICITY_MARGIN}")
    index = int((eigvals.real > 0).sum())

    def build(side_mask):
        cols = []
        skip = False
        idxs = np.nonzero(side_mask)[0]
        for pos, j in enumerate(idxs):
            if skip:
                skip = False
                continue
            lam = eigvals[j]
            if abs(lam.imag) > 1e-9:
                # complex pair: real 2-plane basis (not exercised by builtins)
                cols.append(_sign_normalize(eigvecs[:, j].real))
                cols.append(_sign_normalize(eigvecs[:, j].imag))
                skip = True
            else:
                cols.append(_sign_normalize(eigvecs[:, j].real))
        if not cols:
            return np.zeros((DX.shape[0], 0))
        # stable order: descending real part, ties by descending components
        keyed = sorted(
            zip(idxs[: len(cols)], cols),
            key=lambda kv: (-eigvals[kv[0]].real, tuple(-kv[1])),
        )
        return np.stack([v for _, v in keyed], axis=1)

    unstable = build(eigvals.real > 0)
    stable = build(eigvals.real < 0)
    return eigvals, index, unstable, stable, min_re, float(np.abs(eigvals.real).max())


def linearize_and_index(scenario: Scenario, chart_id: str, point):
    """(DX, eigenvalues, index) at a certified zero of X."""
    point = np.asarray(point, dtype=float)
    speed = float(np.linalg.norm(scenario.x_fn(chart_id)(point[None, :])[0]))
    if speed > 1e-10:
        raise NewtonFailure(f"|X| = {speed:.3e} at the proposed rest point")
    DX = scenario.dx_fn(chart_id)(point[None, :])[0]
    eigvals, index, *_ = _eigen_frames(DX)
    return DX, eigvals, index


def _newton(scenario: Scenario, chart_id: str, seed: np.ndarray, tol: float,
            max_iter: int = 60):
    x_fn = scenario.x_fn(chart_id)
    dx_fn = scenario.dx_fn(chart_id)
    p = np.array(seed, dtype=float)
    r = float(np.linalg.norm(x_fn(p[None, :])[0]))
    for _ in range(max_iter):
        if r < tol:
            return p, r
        X = x_fn(p[None, :])[0]
        J = dx_fn(p[None, :])[0]
        try:
            step = np.linalg.solve(J, -X)
        except np.linalg.LinAlgError:
            return None
        alpha = 1.0
        for _damp in range(30):
            q = p + alpha * step
            rq = float(np.linalg.norm(x_fn(q[None, :])[0]))
            if rq < r or rq < tol:
                p, r = q, rq
                break
            alpha *= 0.5
        else:
            return None
    return (p, r) if r < tol else None


def find_rest_points(scenario: Scenario, grid_density: int = 32,
                     newton_tol: float = 1e-13, diagnostics: dict | None = None):
    """All rest points, certified hyperbolic, deduplicated across charts,
    sorted by (index, f, coordinates) and labeled x0, x1, ...
    """
    if grid_density < 16:
        raise ValueError("grid_density must be at least 16 per axis")
    n = scenario.dim
    found: list[dict] = []
    failures: list[tuple[str, list[float]]] = []

    for chart in scenario.charts:
        axes = []
        for ax in chart.axes:
            if ax.kind == "periodic":
                axes.append(np.linspace(ax.lo, ax.hi, grid_density, endpoint=False))
            else:
                pad = 0.02 * ax.length
                axes.append(np.linspace(ax.lo + pad, ax.hi - pad, grid_density))
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        speed = np.linalg.norm(scenario.x_fn(chart.id)(grid), axis=-1)

        shape = (grid_density,) * n
        sp = speed.reshape(shape)
        local_min = np.ones(shape, dtype=bool)
        for axis, ax in enumerate(chart.axes):
            wrap = ax.kind == "periodic"
            fwd = np.roll(sp, -1, axis=axis)
            bwd = np.roll(sp, 1, axis=axis)
            if not wrap:
                sl_hi = [slice(None)] * n
                sl_hi[axis] = -1
                fwd[tuple(sl_hi)] = np.inf
                sl_lo = [slice(None)] * n
                sl_lo[axis] = 0
                bwd[tuple(sl_lo)] = np.inf
            local_min &= (sp <= fwd) & (sp <= bwd)
        threshold = np.percentile(speed, 5.0)
        seeds = grid[(local_min.reshape(-1)) | (speed <= threshold)]

        for seed in seeds:
            out = _newton(scenario, chart.id, seed, newton_tol)
            if out is None:
                if float(np.linalg.norm(
                        scenario.x_fn(chart.id)(seed[None, :])[0])) <= threshold:
                    failures.append((chart.id, [float(v) for v in seed]))
                continue
            p, r = out
            p = chart.wrap(p)
            if not bool(chart.contains(p[None, :], margin=-1e-9)[0]) and \
               any(ax.kind == "bounded" for ax in chart.axes):
                inside = all(ax.kind == "periodic" or (ax.lo < p[i] < ax.hi)
                             for i, ax in enumerate(chart.axes))
                if not inside:
                    continue
            if any(chart.distance(p, q["coords"]) < DEDUP_DISTANCE
                   for q in found if q["chart_id"] == chart.id):
                continue
            found.append({"chart_id": chart.id, "coords": p, "residual": r})

    # cross-chart dedup; keep the representation farthest inside its box
    merged: list[dict] = []
    for cand in found:
        dup = False
        for kept in merged:
            if kept["chart_id"] == cand["chart_id"]:
                continue
            mapped = scenario.locate(cand["chart_id"], cand["coords"], kept["chart_id"])
            if mapped is not None and \
               float(scenario.chart(kept["chart_id"]).distance(mapped, kept["coords"])) \
               < DEDUP_DISTANCE:
                if _interior_score(scenario, cand) < _interior_score(scenario, kept):
                    kept.update(cand)
                dup = True
                break
        if not dup:
            merged.append(cand)

    points: list[RestPoint] = []
    for item in merged:
        chart_id, p = item["chart_id"], item["coords"]
        DX = scenario.dx_fn(chart_id)(p[None, :])[0]
        eigvals, index, unstable, stable, min_re, max_re = _eigen_frames(DX)
        coords_by_chart = {chart_id: p}
        for other in scenario.charts:
            if other.id == chart_id:
                continue
            mapped = scenario.locate(chart_id, p, other.id)
            if mapped is not None:
                coords_by_chart[other.id] = mapped
        points.append(RestPoint(
            id="", chart_id=chart_id, coords=p, coords_by_chart=coords_by_chart,
            f=float(scenario.f_fn(chart_id)(p[None, :])[0]),
            DX=DX, eigenvalues=eigvals, index=index,
            unstable_frame=unstable, stable_frame=stable,
            residual=item["residual"], min_abs_re=min_re, max_abs_re=max_re))

    points.sort(key=lambda rp: (rp.index, rp.f, tuple(np.round(rp.coords, 9))))
    for j, rp in enumerate(points):
        rp.id = f"x{j}"
    if diagnostics is not None:
        diagnostics["newton_failures"] = failures
    return points


def _interior_score(scenario: Scenario, item) -> float:
    chart = scenario.chart(item["chart_id"])
    margin = chart.inner_box_margin(item["coords"][None, :], 1.0)[0]
    return float(margin)


def choose_orientations(rest_points, convention_seed: int = 0) -> OrientationSet:
    """Canonical orientation data: every flag +1.

    The frames themselves are already deterministic (eigenvectors ordered by
    descending real part, ties by descending components, first significant
    component positive), so two runs agree bit for bit.
    """
    return OrientationSet({rp.id: 1 for rp in rest_points})


def capture_radius_for(rp: RestPoint, base: float = 1e-4) -> float:
    """Capture ball scaled down for weakly hyperbolic points so it stays
    inside the linearization-dominated neighborhood."""
    return base * min(1.0, rp.min_abs_re)


def unstable_sphere_seeds(rp: RestPoint, rho: float, count: int):
    """Launch parameters and seed points on the unstable sphere of radius rho.

    index 1: two parameters (+1, -1); index 2: ``count`` angles.
    Returns (params, seeds (m, n), directions (m, n)).
    """
    k = rp.index
    if k == 0:
        return np.zeros((0,)), np.zeros((0, len(rp.coords))), np.zeros((0, len(rp.coords)))
    if k == 1:
        params = np.array([1.0, -1.0])
        dirs = np.stack([rp.unstable_frame[:, 0], -rp.unstable_frame[:, 0]])
    elif k == 2:
        params = 2.0 * np.pi * np.arange(count) / count
        e1, e2 = rp.unstable_frame[:, 0], rp.unstable_frame[:, 1]
        dirs = np.cos(params)[:, None] * e1 + np.sin(params)[:, None] * e2
    else:
        raise NotImplementedError("unstable spheres beyond dimension 1 are not needed "
                                  "for surfaces and circles")
    return params, rp.coords[None, :] + rho * dirs, dirs


def unstable_disk(scenario: Scenario, rp: RestPoint, rho: float = 1e-3,
                  samples_per_dim: int = 16):
    """First-order parametrization of the local unstable disk.

    Verifies that the quadratic remainder of X on the rho-ball stays below
    0.1 * min|Re lambda| * rho, i.e. the linearization dominates.
    Returns (params, seeds, directions) on the boundary sphere.
    """
    k = rp.index
    if k == 0:
        raise DiskRadiusError("index-0 rest point has a zero-dimensional unstable disk")
    count = 2 if k == 1 else max(8, samples_per_dim * 4)
    params, seeds, dirs = unstable_sphere_seeds(rp, rho, count)
    x_fn = scenario.x_fn(rp.chart_id)
    lin = (rho * dirs) @ rp.DX.T
    remainder = np.linalg.norm(x_fn(seeds) - lin, axis=-1).max()
    allowed = 0.1 * rp.min_abs_re * rho
    if remainder >= allowed:
        raise DiskRadiusError(
            f"rho = {rho}: quadratic remainder {remainder:.3e} exceeds {allowed:.3e}; "
            "shrink the disk")
    return params, seeds, dirs
