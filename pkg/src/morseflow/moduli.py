"""Connecting-orbit enumeration, orientation transport, and the corner
bookkeeping of the compactified unstable sets and moduli spaces.

Signs: a collection of oriented unstable frames {o_x} induces an
orientation on each space of connecting orbits.  Operationally, a frame G
tangent to the orbit space at p is measured against (i) the o_x frame
transported along the orbit by the variational flow and (ii) a stable
frame of the target oriented so that [unstable | stable] is positively
oriented in the chart.  The intersection convention embeds G
antidiagonally in the sum of the two tangent spaces; the resulting
determinant sign is the orientation value.  For an index gap of one this
reduces to the +-1 sign of each orbit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .critical import RestPoint, OrientationSet, capture_radius_for, unstable_sphere_seeds
from .flow import (FLevel, NearRestPoint, Trajectory, classify_limit, flow_batch,
                   integrate_trajectory, level_crossing)
from .scenario import Scenario

__all__ = [
    "Instanton",
    "ModuliFamily",
    "CornerStratum",
    "SweepError",
    "orientation_value",
    "oriented_stable_frame",
    "enumerate_instantons",
    "enumerate_all_instantons",
    "instanton_sign",
    "sample_moduli",
    "greater_than_relation",
    "corner_catalog",
    "basin_partition",
]

LAUNCH_RHO = 1e-3
SWEEP_1SPHERE = 2048
# Launch-angle offsets are amplified like (scale/rho)^(fast/slow - 1) when the
# source eigenvalues differ, so the separatrix angle is refined well past the
# nominal 1e-10 identification tolerance.
BISECT_TOL = 1e-13
MID_LEVEL_DEDUP = 1e-4
DEGENERACY_FLOOR = 1e-8


class SweepError(RuntimeError):
    pass


@dataclass
class Instanton:
    id: str
    src: str
    dst: str
    sign: int                    # with the canonical (all +1) orientation flags
    launch_param: float
    launch_dir: np.ndarray
    trajectory: Trajectory
    mid_chart: str
    mid_point: np.ndarray
    orientation_det: float

    def effective_sign(self, orientations: OrientationSet) -> int:
        return self.sign * orientations.flag(self.src) * orientations.flag(self.dst)


@dataclass
class ModuliFamily:
    """Sampled description of the connecting manifold between two rest points."""
    src: str
    dst: str
    gap: int
    components: list[dict]       # per component: parameter range, orientation sign
    samples: list[dict]          # records (param, level, chart, point)

    @property
    def component_count(self) -> int:
        return len(self.components)

    def nonempty(self) -> bool:
        return bool(self.components)


@dataclass
class CornerStratum:
    root: str
    chain: tuple[str, ...]
    kind: str                    # "unstable" | "flow" | "pointed"
    marker: tuple[str, int] | None
    depth: int
    dim: int
    multiplicity: int
    link_counts: tuple[int, ...]


def _normalize_columns(M: np.ndarray) -> np.ndarray:
    if M.size == 0:
        return M
    norms = np.linalg.norm(M, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    return M / norms


def oriented_stable_frame(scenario: Scenario, rp: RestPoint, chart_id: str,
                          flag: int = 1) -> np.ndarray:
    """Stable frame S of ``rp`` in ``chart_id`` with [unstable | S] positively
    oriented; the orientation flag flips it."""
    U, S = rp.frames_in(scenario, chart_id)
    S = S.copy()
    if S.shape[1] > 0:
        det = np.linalg.det(np.hstack([U, S]))
        if det < 0:
            S[:, -1] = -S[:, -1]
        if flag < 0:
            S[:, -1] = -S[:, -1]
    return S


def orientation_value(G: np.ndarray, F_x: np.ndarray, F_yplus: np.ndarray) -> float:
    """Signed volume of the frame G against the induced orientation.

    G: (n, g) frame tangent to the orbit space at p; F_x: (n, i(x))
    transported source frame; F_yplus: (n, n - i(y)) oriented stable frame
    of the target.  Returns the determinant whose sign orients G; its
    magnitude (after column normalization) measures transversality.
    """
    G = _normalize_columns(np.atleast_2d(np.asarray(G, dtype=float)))
    F_x = _normalize_columns(np.asarray(F_x, dtype=float))
    F_yplus = _normalize_columns(np.asarray(F_yplus, dtype=float))
    n, g = G.shape
    kx = F_x.shape[1]
    ky = F_yplus.shape[1]
    if kx + ky != n + g:
        raise ValueError(f"dimension mismatch: {kx} + {ky} != {n} + {g}")
    cx, *_ = np.linalg.lstsq(F_x, G, rcond=None)
    cy, *_ = np.linalg.lstsq(F_yplus, G, rcond=None)
    lift, *_ = np.linalg.lstsq(np.hstack([F_x, F_yplus]), np.eye(n), rcond=None)
    test = np.zeros((n + g, n + g))
    test[:kx, :g] = cx
    test[kx:, :g] = -cy
    test[:, g:] = lift
    return float(np.linalg.det(test))


def _capture_stop(rest_points) -> NearRestPoint:
    radius = min(capture_radius_for(rp) for rp in rest_points)
    return NearRestPoint(radius=radius)


def _trace_representative(scenario, x: RestPoint, direction_vec, rest_points,
                          rtol=1e-9, atol=1e-10):
    seed = x.coords + LAUNCH_RHO * direction_vec
    frame = x.unstable_frame
    return integrate_trajectory(
        scenario, (x.chart_id, seed), direction="forward",
        stop=_capture_stop(rest_points), rest_points=rest_points,
        rtol=rtol, atol=atol, frame=frame)


def instanton_sign(scenario: Scenario, trajectory: Trajectory, x: RestPoint,
                   y: RestPoint, warn: list | None = None) -> tuple[int, float]:
    """Sign of one connecting orbit from the transported frame comparison."""
    chart_id, p = trajectory.last()
    F_x = trajectory.last_frame()
    if F_x is None:
        raise ValueError("trajectory was integrated without the variational frame")
    X_p = scenario.x_fn(chart_id)(p[None, :])[0]
    F_yplus = oriented_stable_frame(scenario, y, chart_id)
    det = orientation_value(X_p[:, None], F_x, F_yplus)
    if abs(det) < DEGENERACY_FLOOR and warn is not None:
        warn.append(f"near-degenerate transversality for {x.id}->{y.id}: det={det:.2e}")
    return (1 if det > 0 else -1), det


def _mid_point(scenario, traj, x, y):
    c = 0.5 * (x.f + y.f)
    return level_crossing(scenario, traj, c)


def _sink_time_cap(rest_points) -> float:
    sink_rate = min((rp.min_abs_re for rp in rest_points if rp.index == 0),
                    default=1.0)
    return 45.0 / sink_rate + 5.0


def _classify_angles(scenario, x: RestPoint, angles, rest_points, tol_scale=1.0,
                     h_factor=1.0):
    """Forward sinks for seeds launched at the given angles (index-2 source)."""
    e1, e2 = x.unstable_frame[:, 0], x.unstable_frame[:, 1]
    dirs = np.cos(angles)[:, None] * e1 + np.sin(angles)[:, None] * e2
    seeds = x.coords[None, :] + LAUNCH_RHO * dirs
    rate = max(rp.max_abs_re for rp in rest_points)
    res = flow_batch(scenario, [x.chart_id], seeds, rest_points,
                     direction="forward",
                     h=min(0.25 * h_factor / rate, 0.02 * h_factor) * tol_scale,
                     t_max=_sink_time_cap(rest_points))
    return res.sink


def _classify_params_1d(scenario, x: RestPoint, rest_points, tol_scale=1.0):
    params, seeds, dirs = unstable_sphere_seeds(x, LAUNCH_RHO, 2)
    rate = max(rp.max_abs_re for rp in rest_points)
    res = flow_batch(scenario, [x.chart_id], seeds, rest_points,
                     direction="forward", h=min(0.25 / rate, 0.02) * tol_scale,
                     t_max=_sink_time_cap(rest_points))
    return params, dirs, res.sink


def enumerate_from_source(scenario: Scenario, x: RestPoint, rest_points,
                          sweep: int = SWEEP_1SPHERE,
                          warnings: list | None = None,
                          tol_scale: float = 1.0) -> dict[str, list[Instanton]]:
    """All isolated connecting orbits leaving ``x`` toward rest points one
    index below, grouped by destination.

    Index-1 sources launch two seeds; index-2 sources sweep the unstable
    circle once and refine every basin boundary (where the sink
    classification flips) by bisection to the separatrix angle.
    """
    by_idx = {j: rp for j, rp in enumerate(rest_points)}
    candidates: list[tuple[float, np.ndarray]] = []
    if x.index == 1:
        params, dirs, _sinks = _classify_params_1d(scenario, x, rest_points, tol_scale)
        candidates = [(float(p), d) for p, d in zip(params, dirs)]
    elif x.index == 2:
        candidates = _source_boundaries(scenario, x, rest_points, sweep,
                                        warnings, tol_scale)
    else:
        raise NotImplementedError("sources of index above 2 are out of scope")

    out: dict[str, list[Instanton]] = {}
    for prm, d in candidates:
        traj = _trace_representative(scenario, x, d, rest_points)
        hit = classify_limit(traj, rest_points,
                             capture_radius=_capture_stop(rest_points).radius * 1.5)
        if hit is None:
            if warnings is not None:
                warnings.append(f"candidate at parameter {prm} from {x.id} unresolved")
            continue
        y = next(rp for rp in rest_points if rp.id == hit)
        if x.index - y.index != 1:
            if warnings is not None:
                warnings.append(f"candidate at parameter {prm} from {x.id} landed at "
                                f"{y.id} with index gap {x.index - y.index}")
            continue
        mid_chart, mid_pt = _mid_point(scenario, traj, x, y)
        siblings = out.setdefault(y.id, [])
        if any(other.mid_chart == mid_chart and
               float(scenario.chart(mid_chart).distance(mid_pt, other.mid_point))
               < MID_LEVEL_DEDUP for other in siblings):
            continue
        sign, det = instanton_sign(scenario, traj, x, y, warn=warnings)
        siblings.append(Instanton(
            id=f"{x.id}>{y.id}#{len(siblings)}", src=x.id, dst=y.id, sign=sign,
            launch_param=float(prm), launch_dir=d, trajectory=traj,
            mid_chart=mid_chart, mid_point=mid_pt, orientation_det=det))
    return out


def enumerate_instantons(scenario: Scenario, x: RestPoint, y: RestPoint,
                         rest_points, sweep: int = SWEEP_1SPHERE,
                         warnings: list | None = None,
                         tol_scale: float = 1.0) -> list[Instanton]:
    """Isolated connecting orbits from x to y (index gap must be one)."""
    if x.index - y.index != 1:
        raise ValueError(f"enumerate_instantons needs an index gap of 1, got "
                         f"{x.index} - {y.index}")
    grouped = enumerate_from_source(scenario, x, rest_points, sweep=sweep,
                                    warnings=warnings, tol_scale=tol_scale)
    return grouped.get(y.id, [])


def _source_boundaries(scenario, x, rest_points, sweep, warnings, tol_scale):
    """Separatrix launch angles of an index-2 source: one refined angle per
    basin boundary of the sink classification over the unstable circle.
    All open boundaries are bisected together, one batched probe per level."""
    angles = 2.0 * np.pi * np.arange(sweep) / sweep
    sinks = _classify_angles(scenario, x, angles, rest_points, tol_scale)
    hyperbolic = {j for j, rp in enumerate(rest_points) if 0 < rp.index < scenario.dim}

    done: list[float] = []
    open_brackets = []  # [lo, hi, s_lo, s_hi]
    m = len(angles)
    for k in range(m):
        s0, s1 = int(sinks[k]), int(sinks[(k + 1) % m])
        a0 = angles[k]
        a1 = angles[(k + 1) % m] + (2 * np.pi if k + 1 == m else 0.0)
        if s0 in hyperbolic:
            done.append(float(a0))  # seed sits on the separatrix already
            continue
        if s0 == s1 or s1 in hyperbolic:
            continue
        if s0 < 0 or s1 < 0:
            if warnings is not None:
                warnings.append(f"unresolved seed near angle {a0:.6f} from {x.id}")
            continue
        open_brackets.append([a0, a1, s0, s1])

    for _level in range(64):
        narrow = [b for b in open_brackets if b[1] - b[0] < BISECT_TOL]
        done.extend(0.5 * (b[0] + b[1]) for b in narrow)
        open_brackets = [b for b in open_brackets if b[1] - b[0] >= BISECT_TOL]
        if not open_brackets:
            break
        mids = np.array([0.5 * (b[0] + b[1]) for b in open_brackets])
        s_mids = _classify_angles(scenario, x, mids, rest_points, tol_scale,
                                  h_factor=2.0)
        still = []
        for b, mid, s_mid in zip(open_brackets, mids, s_mids):
            s_mid = int(s_mid)
            if s_mid != b[2] and s_mid != b[3]:
                done.append(float(mid))  # probe landed on the separatrix
            elif s_mid == b[2]:
                still.append([mid, b[1], s_mid, b[3]])
            else:
                still.append([b[0], mid, b[2], s_mid])
        open_brackets = still
    done.extend(0.5 * (b[0] + b[1]) for b in open_brackets)

    e1, e2 = x.unstable_frame[:, 0], x.unstable_frame[:, 1]
    return [(float(a), np.cos(a) * e1 + np.sin(a) * e2) for a in sorted(done)]


def enumerate_all_instantons(scenario: Scenario, rest_points,
                             sweep: int = SWEEP_1SPHERE,
                             warnings: list | None = None,
                             tol_scale: float = 1.0) -> dict[tuple[str, str], list[Instanton]]:
    """Gap-1 instantons for every adjacent pair, one sweep per source."""
    out: dict[tuple[str, str], list[Instanton]] = {}
    for x in rest_points:
        has_targets = any(x.index - y.index == 1 for y in rest_points)
        if not has_targets or x.index == 0:
            continue
        grouped = enumerate_from_source(scenario, x, rest_points, sweep=sweep,
                                        warnings=warnings, tol_scale=tol_scale)
        for y in rest_points:
            if x.index - y.index == 1:
                out[(x.id, y.id)] = grouped.get(y.id, [])
    return out


def sample_moduli(scenario: Scenario, x: RestPoint, y: RestPoint, rest_points,
                  resolution: int = 8, instantons=None,
                  sweep: int = SWEEP_1SPHERE) -> ModuliFamily:
    """Sampled parametrization of the connecting manifold from x to y.

    Gap 1: one component per isolated orbit.  Gap 2 (surface case): the
    component arcs of launch angles whose sink is y, sampled on a
    (parameter, level) grid through the Lyapunov-level identification.
    An empty family (x not above y) is a valid result, not an error.
    """
    gap = x.index - y.index
    if gap < 1:
        return ModuliFamily(src=x.id, dst=y.id, gap=gap, components=[], samples=[])
    components: list[dict] = []
    samples: list[dict] = []
    levels = y.f + (x.f - y.f) * (np.arange(1, resolution + 1) / (resolution + 1.0))

    if gap == 1:
        if instantons is None:
            instantons = enumerate_instantons(scenario, x, y, rest_points, sweep=sweep)
        for inst in instantons:
            components.append({"kind": "orbit", "param": inst.launch_param,
                               "orientation_sign": inst.sign})
            for c in levels:
                chart_id, pt = level_crossing(scenario, inst.trajectory, float(c))
                samples.append({"param": inst.launch_param, "level": float(c),
                                "chart": chart_id, "point": pt})
        return ModuliFamily(src=x.id, dst=y.id, gap=1, components=components,
                            samples=samples)

    if gap != 2 or x.index != 2:
        raise NotImplementedError("moduli sampling beyond surface gaps is out of scope")

    y_idx = next(j for j, rp in enumerate(rest_points) if rp.id == y.id)
    angles = 2.0 * np.pi * np.arange(sweep) / sweep
    sinks = _classify_angles(scenario, x, angles, rest_points)
    mask = sinks == y_idx
    if not mask.any():
        return ModuliFamily(src=x.id, dst=y.id, gap=2, components=[], samples=[])

    arcs = _runs_on_circle(mask)
    e1, e2 = x.unstable_frame[:, 0], x.unstable_frame[:, 1]
    for (k0, k1) in arcs:
        a0 = angles[k0]
        a1 = angles[k1 % len(angles)] + (2 * np.pi if k1 >= len(angles) else 0.0)
        mid = 0.5 * (a0 + a1)
        sign = moduli_orientation_sign(scenario, x, y, mid, rest_points)
        components.append({"kind": "arc", "param_lo": float(a0), "param_hi": float(a1),
                           "orientation_sign": sign})
        thetas = np.linspace(a0, a1, resolution + 2)[1:-1]
        for th in thetas:
            dth = np.cos(th) * e1 + np.sin(th) * e2
            tj = _trace_representative(scenario, x, dth, rest_points)
            for c in levels:
                chart_id, pt = level_crossing(scenario, tj, float(c))
                samples.append({"param": float(th), "level": float(c),
                                "chart": chart_id, "point": pt})
    return ModuliFamily(src=x.id, dst=y.id, gap=2, components=components,
                        samples=samples)


def _runs_on_circle(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal index runs [k0, k1) of True on a circular array; k1 may wrap
    past the array length for runs through index 0."""
    m = len(mask)
    if mask.all():
        return [(0, m)]
    if not mask.any():
        return []
    runs = []
    for k in range(m):
        if mask[k] and not mask[(k - 1) % m]:
            j = k
            while mask[j % m]:
                j += 1
            runs.append((k, j))
    return runs


def moduli_orientation_sign(scenario: Scenario, x: RestPoint, y: RestPoint,
                            theta: float, rest_points) -> int:
    """Orientation value of the (launch-parameter, level) frame at a
    representative point of a gap-2 component."""
    e1, e2 = x.unstable_frame[:, 0], x.unstable_frame[:, 1]
    d = np.cos(theta) * e1 + np.sin(theta) * e2
    dperp = -np.sin(theta) * e1 + np.cos(theta) * e2
    frame0 = np.column_stack([x.unstable_frame, LAUNCH_RHO * dperp])
    seed = x.coords + LAUNCH_RHO * d
    traj = integrate_trajectory(
        scenario, (x.chart_id, seed), direction="forward",
        stop=FLevel(0.5 * (x.f + y.f)), rest_points=rest_points, frame=frame0)
    chart_id, p = traj.last()
    F = traj.last_frame()
    F_x = F[:, :x.index]
    V = F[:, x.index]
    X_p = scenario.x_fn(chart_id)(p[None, :])[0]
    dfX = float(scenario.df_of_x_fn(chart_id)(p[None, :])[0])
    Vt = V - X_p * (float(scenario.df_fn(chart_id)(p[None, :])[0] @ V) / dfX)
    dpdc = X_p / dfX
    G = np.column_stack([Vt, dpdc])
    F_yplus = _stable_frame_at(scenario, y, chart_id, p, traj, rest_points)
    det = orientation_value(G, F_x, F_yplus)
    return 1 if det > 0 else -1


def _stable_frame_at(scenario, y: RestPoint, chart_id, p, traj, rest_points):
    """Oriented stable frame of y transported backward to p.

    The point p sits in the middle of an orbit sinking at y; flow forward
    from p to the capture ball and pull the frame back through the
    accumulated variational transport (which already accounts for chart
    handoffs via transition Jacobians).
    """
    n = scenario.dim
    fwd = integrate_trajectory(scenario, (chart_id, p), direction="forward",
                               stop=_capture_stop(rest_points),
                               rest_points=rest_points, frame=np.eye(n))
    end_chart, _pend = fwd.last()
    M = fwd.last_frame()
    S_end = oriented_stable_frame(scenario, y, end_chart)
    return np.linalg.solve(M, S_end)


def greater_than_relation(rest_points, instantons, families) -> dict[str, dict[str, int]]:
    """Direct children map: x -> {y: component count} over nonempty orbit sets."""
    children: dict[str, dict[str, int]] = {rp.id: {} for rp in rest_points}
    for (xid, yid), lst in instantons.items():
        if lst:
            children[xid][yid] = len(lst)
    for (xid, yid), fam in families.items():
        if fam.gap >= 2 and fam.nonempty():
            children[xid][yid] = fam.component_count
    return children


def corner_catalog(scenario: Scenario, rest_points, children, root) -> list[CornerStratum]:
    """All corner strata below the compactified unstable set of ``root`` (a
    rest point id) or of the compactified moduli of a pair (x_id, y_id).

    Every stratum satisfies dim = ambient - depth by construction; point
    markers at a rest point add one to the depth.
    """
    by_id = {rp.id: rp for rp in rest_points}

    def chains_from(start):
        stack = [(start,)]
        while stack:
            chain = stack.pop()
            yield chain
            for nxt in sorted(children.get(chain[-1], {})):
                stack.append(chain + (nxt,))

    out: list[CornerStratum] = []
    if isinstance(root, str):
        x = by_id[root]
        ambient = x.index
        for chain in chains_from(root):
            k = len(chain) - 1
            counts = tuple(children[chain[i]][chain[i + 1]] for i in range(k))
            mult = int(np.prod(counts)) if counts else 1
            out.append(CornerStratum(
                root=f"W-:{root}", chain=chain, kind="unstable", marker=None,
                depth=k, dim=ambient - k, multiplicity=mult, link_counts=counts))
        out.sort(key=lambda s: (s.depth, s.chain))
        return out

    xid, yid = root
    ambient = by_id[xid].index - by_id[yid].index
    for chain in chains_from(xid):
        if chain[-1] != yid:
            continue
        m = len(chain) - 2          # intermediate rest points
        counts = tuple(children[chain[i]][chain[i + 1]] for i in range(len(chain) - 1))
        # one link carries the free flow parameter
        for marked in range(len(chain) - 1):
            mult = int(np.prod(counts))
            out.append(CornerStratum(
                root=f"M:{xid}>{yid}", chain=chain, kind="flow",
                marker=("link", marked), depth=m, dim=ambient - m,
                multiplicity=mult, link_counts=counts))
        # point markers at the rest points of the chain
        for node in range(len(chain)):
            mult = int(np.prod(counts))
            out.append(CornerStratum(
                root=f"M:{xid}>{yid}", chain=chain, kind="pointed",
                marker=("node", node), depth=m + 1, dim=ambient - m - 1,
                multiplicity=mult, link_counts=counts))
    out.sort(key=lambda s: (s.depth, s.chain, s.kind, s.marker or ("", -1)))
    return out


def basin_partition(scenario: Scenario, rest_points, sample_count: int = 10_000,
                    seed: int = 23) -> dict:
    """Flow random points both ways; every point must land in some pair
    (backward limit, forward limit).  Reports the fraction per pair."""
    rng = np.random.default_rng(seed)
    per_chart = max(1, sample_count // len(scenario.charts))
    ids = [rp.id for rp in rest_points]
    pair_counts: dict[tuple[str, str], int] = {}
    unresolved = 0
    total = 0
    for chart in scenario.charts:
        pts = chart.sample(rng, per_chart)
        total += len(pts)
        fs = flow_batch(scenario, [chart.id], pts, rest_points, direction="forward")
        bs = flow_batch(scenario, [chart.id], pts, rest_points, direction="backward")
        for sf, sb in zip(fs.sink, bs.sink):
            if sf < 0 or sb < 0:
                unresolved += 1
                continue
            key = (ids[sb], ids[sf])
            pair_counts[key] = pair_counts.get(key, 0) + 1
    fractions = {f"{a}>{b}": c / total for (a, b), c in sorted(pair_counts.items())}
    return {
        "samples": total,
        "classified_fraction": (total - unresolved) / total,
        "unresolved": unresolved,
        "pair_fractions": fractions,
    }
