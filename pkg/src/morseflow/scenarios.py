"""Builtin scenarios with closed-form ground truth, plus scenario JSON I/O.

All five builtins drive the flow by X = -grad_g f.  The circle and torus
use single periodic charts; the spheres use two stereographic charts with
the second projection mirrored so the transition is orientation
preserving (v = 1/z in complex notation, Jacobian determinant 1/|u|^4).
"""

from __future__ import annotations

import json
from pathlib import Path

from .expressions import Expression, const, parse_expression
from .forms import DifferentialForm
from .scenario import Axis, Chart, GroundTruth, Scenario, ScenarioError, Transition

__all__ = [
    "builtin_scenarios",
    "builtin_names",
    "get_scenario",
    "load_scenario",
    "scenario_to_json",
    "scenario_from_json",
    "export_scenarios",
    "minus_gradient",
]

E = parse_expression


def minus_gradient(metric: tuple[tuple[Expression, ...], ...], f: Expression, n: int):
    """Components of -grad_g f from the metric and the potential.

    Inverts the metric by adjugate; only needed for n <= 2 here.
    """
    df = [f.diff(i) for i in range(n)]
    if n == 1:
        return (-(df[0] / metric[0][0]),)
    if n == 2:
        a, b = metric[0][0], metric[0][1]
        c, d = metric[1][0], metric[1][1]
        det = a * d - b * c
        inv = ((d / det, -(b / det)), (-(c / det), a / det))
        return tuple(-(inv[i][0] * df[0] + inv[i][1] * df[1]) for i in range(2))
    raise ScenarioError("minus_gradient supports dimensions 1 and 2")


def _form(name, degree, dim, coeffs, closed):
    return DifferentialForm(name=name, degree=degree, dim=dim, coefficients=coeffs, closed=closed)


def _circle(name: str, f_src: str, n_wells: int) -> Scenario:
    chart = Chart(id="c", axes=(Axis("periodic", 0.0, 1.0),))
    metric = {"c": ((E("1"),),)}
    f = E(f_src)
    X = minus_gradient(metric["c"], f, 1)
    forms = {
        "dt1": _form("dt1", 1, 1, {"c": {(0,): E("1")}}, closed=True),
        "one": _form("one", 0, 1, {"c": {(): E("1")}}, closed=True),
    }
    return Scenario(
        name=name, dim=1, charts=(chart,),
        metric=metric, vector_field={"c": X}, lyapunov={"c": f}, forms=forms,
        ground_truth=GroundTruth(rest_points=(n_wells, n_wells), betti=(1, 1),
                                 instantons_per_pair=2 if n_wells == 1 else 1),
    )


def _torus() -> Scenario:
    chart = Chart(id="t", axes=(Axis("periodic", 0.0, 1.0), Axis("periodic", 0.0, 1.0)))
    metric = {"t": ((E("1"), E("0")), (E("0"), E("1")))}
    f = E("cos(2*pi*t1) + cos(2*pi*t2)")
    X = minus_gradient(metric["t"], f, 2)
    one = E("1")
    forms = {
        "dt1": _form("dt1", 1, 2, {"t": {(0,): one}}, closed=True),
        "dt2": _form("dt2", 1, 2, {"t": {(1,): one}}, closed=True),
        "area": _form("area", 2, 2, {"t": {(0, 1): one}}, closed=True),
        "one": _form("one", 0, 2, {"t": {(): one}}, closed=True),
    }
    return Scenario(
        name="flat_torus", dim=2, charts=(chart,),
        metric=metric, vector_field={"t": X}, lyapunov={"t": f}, forms=forms,
        ground_truth=GroundTruth(rest_points=(1, 2, 1), betti=(1, 2, 1), instantons_per_pair=2),
    )


# Stereographic embeddings: chart u projects from the north pole and covers
# M minus N (south pole at the origin); chart v projects from the south pole
# with the second coordinate mirrored, covering M minus S.
_EMBED_U = ("2*t1/(1+t1^2+t2^2)", "2*t2/(1+t1^2+t2^2)", "(t1^2+t2^2-1)/(1+t1^2+t2^2)")
_EMBED_V = ("2*t1/(1+t1^2+t2^2)", "-2*t2/(1+t1^2+t2^2)", "(1-t1^2-t2^2)/(1+t1^2+t2^2)")
_SPHERE_BOX = 2.2
_INVERSION = ("t1/(t1^2+t2^2)", "-t2/(t1^2+t2^2)")
_OVERLAP_GUARD = "t1^2 + t2^2 - 0.25"


def sphere_embedding(chart_id: str) -> tuple[Expression, ...]:
    src = _EMBED_U if chart_id == "u" else _EMBED_V
    return tuple(E(s) for s in src)


def _sphere_charts() -> tuple[Chart, Chart]:
    axes = (Axis("bounded", -_SPHERE_BOX, _SPHERE_BOX), Axis("bounded", -_SPHERE_BOX, _SPHERE_BOX))
    inv = tuple(E(s) for s in _INVERSION)
    guard = E(_OVERLAP_GUARD)
    u = Chart(id="u", axes=axes, transitions=(Transition("v", guard, inv, inv),))
    v = Chart(id="v", axes=axes, transitions=(Transition("u", guard, inv, inv),))
    return u, v


def ambient_form(name: str, degree: int, components, closed: bool = False) -> DifferentialForm:
    """Sphere form pulled back from ambient-space data.

    degree 0: ``components`` is one Expression in (t1,t2,t3) = (x,y,z).
    degree 1: three Expressions (P,Q,R) meaning P dx + Q dy + R dz.
    """
    coeffs: dict[str, dict[tuple[int, ...], Expression]] = {}
    for chart_id in ("u", "v"):
        embed = sphere_embedding(chart_id)
        if degree == 0:
            coeffs[chart_id] = {(): components.substitute(embed)}
            continue
        per: dict[tuple[int, ...], Expression] = {}
        for j in range(2):
            total = None
            for amb, comp in zip(embed, components):
                term = comp.substitute(embed) * amb.diff(j)
                total = term if total is None else total + term
            per[(j,)] = total
        coeffs[chart_id] = per
    return DifferentialForm(name=name, degree=degree, dim=2, coefficients=coeffs, closed=closed)


# The gradient fields of the sphere scenarios in stereographic coordinates.
# For f restricted from ambient space, -grad f on the round sphere is
# 2f n - grad_amb(f) at n; pushing through either projection gives compact
# rational components (identical in both charts thanks to the mirrored
# second projection).  The gradient-identity and chart-consistency checks
# validate these against the metric numerically.
_SPHERE_X = {
    "round_sphere_height": {"u": ("-t1", "-t2"), "v": ("t1", "t2")},
    "ellipsoid_sphere": {
        cid: (
            "4*t1*((t1^2+t2^2)^2 - 2*t1^2 + 1 - (t1^2+t2^2-1)*(2*t1^2+t2^2))"
            "/(1+t1^2+t2^2)^2",
            "2*t2*((t1^2+t2^2)^2 + 1 - 6*t1^2 - 2*t2^2"
            " - 2*(t1^2+t2^2-1)*(2*t1^2+t2^2))/(1+t1^2+t2^2)^2",
        )
        for cid in ("u", "v")
    },
}


def _sphere(name: str, f_ambient: str, rest, betti, inst) -> Scenario:
    u, v = _sphere_charts()
    lam = "4/(1+t1^2+t2^2)^2"
    metric_chart = ((E(lam), E("0")), (E("0"), E(lam)))
    metric = {"u": metric_chart, "v": metric_chart}
    f_amb = E(f_ambient)
    lyapunov = {cid: f_amb.substitute(sphere_embedding(cid)) for cid in ("u", "v")}
    X = {cid: tuple(E(s) for s in _SPHERE_X[name][cid]) for cid in ("u", "v")}
    area_coeff = E(f"(1/(4*pi)) * ({lam})")
    forms = {
        "area": _form("area", 2, 2, {"u": {(0, 1): area_coeff}, "v": {(0, 1): area_coeff}},
                      closed=True),
        "one": _form("one", 0, 2, {"u": {(): E("1")}, "v": {(): E("1")}}, closed=True),
    }
    return Scenario(
        name=name, dim=2, charts=(u, v),
        metric=metric, vector_field=X, lyapunov=lyapunov, forms=forms,
        ground_truth=GroundTruth(rest_points=rest, betti=betti, instantons_per_pair=inst),
    )


def builtin_scenarios() -> list[Scenario]:
    return [
        _circle("circle_cos", "cos(2*pi*t1)", 1),
        _circle("double_well_circle", "cos(4*pi*t1)", 2),
        _sphere("round_sphere_height", "t3", (1, 0, 1), (1, 0, 1), None),
        _sphere("ellipsoid_sphere", "t1^2 + 2*t2^2 + 3*t3^2", (2, 2, 2), (1, 0, 1), 1),
        _torus(),
    ]


def builtin_names() -> list[str]:
    return [s.name for s in builtin_scenarios()]


def get_scenario(name: str) -> Scenario:
    for s in builtin_scenarios():
        if s.name == name:
            return s
    raise ScenarioError(f"unknown builtin scenario {name!r}; choices: {builtin_names()}")


# ---------------------------------------------------------------------------
# JSON round trip.

def _index_key(index: tuple[int, ...]) -> str:
    return ",".join(str(i + 1) for i in index)


def _index_from_key(key: str) -> tuple[int, ...]:
    if not key:
        return ()
    return tuple(int(p) - 1 for p in key.split(","))


def scenario_to_json(s: Scenario) -> dict:
    doc = {
        "name": s.name,
        "dimension": s.dim,
        "charts": [
            {
                "id": c.id,
                "axes": [{"kind": ax.kind, "lo": ax.lo, "hi": ax.hi} for ax in c.axes],
                "transitions": [
                    {
                        "target": tr.target,
                        "predicate": tr.guard.to_source(),
                        "map": [e.to_source() for e in tr.forward],
                        "inverse": [e.to_source() for e in tr.inverse],
                    }
                    for tr in c.transitions
                ],
            }
            for c in s.charts
        ],
        "metric": {cid: [[e.to_source() for e in row] for row in rows]
                   for cid, rows in s.metric.items()},
        "vector_field": {cid: [e.to_source() for e in comps]
                         for cid, comps in s.vector_field.items()},
        "lyapunov": {cid: e.to_source() for cid, e in s.lyapunov.items()},
        "forms": [
            {
                "name": f.name,
                "degree": f.degree,
                "closed": f.closed,
                "coefficients": {cid: {_index_key(idx): e.to_source()
                                       for idx, e in per.items() if not e.is_zero()}
                                 for cid, per in f.coefficients.items()},
            }
            for f in s.forms.values()
        ],
        "ground_truth": None,
    }
    if s.ground_truth is not None:
        gt = s.ground_truth
        doc["ground_truth"] = {
            "rest_points": list(gt.rest_points) if gt.rest_points else None,
            "betti": list(gt.betti) if gt.betti else None,
            "instantons_per_pair": gt.instantons_per_pair,
        }
    return doc


def scenario_from_json(doc: dict) -> Scenario:
    dim = int(doc["dimension"])
    charts = []
    for cd in doc["charts"]:
        axes = tuple(Axis(a["kind"], float(a["lo"]), float(a["hi"])) for a in cd["axes"])
        transitions = tuple(
            Transition(
                target=td["target"],
                guard=E(td["predicate"]),
                forward=tuple(E(x) for x in td["map"]),
                inverse=tuple(E(x) for x in td["inverse"]),
            )
            for td in cd.get("transitions", [])
        )
        charts.append(Chart(id=cd["id"], axes=axes, transitions=transitions))
    metric = {cid: tuple(tuple(E(x) for x in row) for row in rows)
              for cid, rows in doc["metric"].items()}
    vector_field = {cid: tuple(E(x) for x in comps)
                    for cid, comps in doc["vector_field"].items()}
    lyapunov = {cid: E(src) for cid, src in doc["lyapunov"].items()}
    forms = {}
    for fd in doc.get("forms", []):
        coeffs = {cid: {_index_from_key(k): E(src) for k, src in per.items()}
                  for cid, per in fd["coefficients"].items()}
        forms[fd["name"]] = DifferentialForm(name=fd["name"], degree=int(fd["degree"]),
                                             dim=dim, coefficients=coeffs,
                                             closed=bool(fd["closed"]))
    gt = None
    if doc.get("ground_truth"):
        g = doc["ground_truth"]
        gt = GroundTruth(
            rest_points=tuple(g["rest_points"]) if g.get("rest_points") else None,
            betti=tuple(g["betti"]) if g.get("betti") else None,
            instantons_per_pair=g.get("instantons_per_pair"),
        )
    return Scenario(name=doc["name"], dim=dim, charts=tuple(charts), metric=metric,
                    vector_field=vector_field, lyapunov=lyapunov, forms=forms,
                    ground_truth=gt)


def load_scenario(source: str | Path) -> Scenario:
    """Builtin name or path to a scenario JSON file."""
    text = str(source)
    if text in builtin_names():
        return get_scenario(text)
    path = Path(source)
    if not path.exists():
        raise ScenarioError(f"{text!r} is neither a builtin scenario nor an existing file")
    with open(path, encoding="utf-8") as fh:
        return scenario_from_json(json.load(fh))


def export_scenarios(directory: str | Path) -> list[Path]:
    """Write the five builtin scenario JSON files; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for s in builtin_scenarios():
        path = directory / f"{s.name}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(scenario_to_json(s), fh, indent=2, sort_keys=True)
            fh.write("\n")
        out.append(path)
    return out
