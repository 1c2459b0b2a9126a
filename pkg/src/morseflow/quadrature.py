"""Deterministic quadrature rules for the improper integrals over open
unstable manifolds and moduli.

Level-direction integrals run in the Lyapunov value c with the logistic
substitution c = lo + (hi - lo) * sigma(s): integrable endpoint
singularities of square-root type become exponentially decaying smooth
integrands in s, and the span is chosen so the discarded tails sit below
the target tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = ["QuadratureConfig", "gauss_panels", "logistic_levels"]


@dataclass(frozen=True)
class QuadratureConfig:
    order: int = 32              # Gauss-Legendre nodes per level panel
    level_panels: int = 12
    theta_order: int = 32        # nodes per angular panel
    theta_panels: int = 4        # panels per angular arc
    radial_order: int = 16       # launch-disk corrections
    logistic_span: float = 60.0
    tail_cutoff: float = 1e-12
    tolerance: float = 1e-7
    step_scale: float = 1.0      # multiplies the recorded-fiber step size

    def doubled(self) -> "QuadratureConfig":
        return replace(self, order=2 * self.order, theta_order=2 * self.theta_order,
                       radial_order=2 * self.radial_order)

    def signature(self) -> tuple:
        return (self.order, self.level_panels, self.theta_order, self.theta_panels,
                self.radial_order, self.logistic_span, self.step_scale)


def gauss_panels(a: float, b: float, panels: int, order: int):
    """Composite Gauss-Legendre nodes and weights on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    nodes = []
    weights = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes.append(0.5 * (lo + hi) + half * x)
        weights.append(half * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def logistic_levels(lo: float | np.ndarray, hi: float | np.ndarray,
                    cfg: QuadratureConfig):
    """Level nodes and weights on (lo, hi) under the logistic substitution.

    lo/hi may be arrays (per-fiber ranges); nodes broadcast to
    shape (..., panels * order).
    """
    s, ws = gauss_panels(-cfg.logistic_span, cfg.logistic_span,
                         cfg.level_panels, cfg.order)
    sig = _sigmoid(s)
    dsig = sig * (1.0 - sig)
    lo = np.asarray(lo, dtype=float)[..., None]
    hi = np.asarray(hi, dtype=float)[..., None]
    span = hi - lo
    nodes = lo + span * sig
    weights = span * dsig * ws
    return nodes, weights
