"""Gauss-Legendre integration over the threshold support and a central-difference fallback."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SupportSet

DEFAULT_NODES = 64


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    support: SupportSet

    @property
    def size(self) -> int:
        return self.nodes.shape[0]


def make_gauss_legendre(support: SupportSet, n_nodes: int = DEFAULT_NODES, breakpoints=()) -> QuadratureRule:
    """Gauss-Legendre rule on the support.

    With ``breakpoints`` the rule is composite: each panel between
    consecutive breakpoints gets its own ``n_nodes``-point rule, which keeps
    the error small for integrands with kinks in a higher derivative.
    """
    if int(n_nodes) < 2:
        raise ValueError(f"Gauss-Legendre rule needs at least 2 nodes, got {n_nodes}")
    x, w = np.polynomial.legendre.leggauss(int(n_nodes))
    inner = sorted({float(b) for b in breakpoints if support.t_lo < b < support.t_hi})
    edges = np.array([support.t_lo] + inner + [support.t_hi])
    half = 0.5 * np.diff(edges)
    nodes = (edges[:-1, None] + half[:, None] * (x + 1.0)).ravel()
    weights = (half[:, None] * w).ravel()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes, weights, support)


def integrate(f, rule: QuadratureRule):
    """Apply ``rule`` to ``f``.

    ``f`` maps the node vector (shape ``(K,)``) to values of shape ``(K,)`` or
    ``(K, ...)``; vector-valued integrands are integrated componentwise.
    """
    values = np.asarray(f(rule.nodes), dtype=float)
    if values.shape[:1] != rule.nodes.shape:
        raise ValueError(f"integrand returned shape {values.shape}, expected leading axis {rule.size}")
    bad = ~np.isfinite(values.reshape(rule.size, -1)).all(axis=1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise FloatingPointError(f"integrand not finite at node t={rule.nodes[k]!r}")
    out = np.tensordot(rule.weights, values, axes=(0, 0))
    return float(out) if out.ndim == 0 else out


def default_step(t):
    """cbrt(machine eps) * max(1, |t|), elementwise."""
    return np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(t))


def numeric_deriv(f, t, h=None):
    """Central difference ``(f(t + h) - f(t - h)) / (2h)``."""
    if h is None:
        h = default_step(t)
    hi = np.asarray(f(t + h), dtype=float)
    lo = np.asarray(f(t - h), dtype=float)
    h = np.asarray(h, dtype=float)
    out = (hi - lo) / (2.0 * h.reshape(h.shape + (1,) * (hi.ndim - h.ndim)))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite numeric derivative at t={t!r}")
    return out


def rule_for(weight, n_nodes: int = DEFAULT_NODES, models=()) -> QuadratureRule:
    """Composite Gauss-Legendre rule on a weight's support.

    Panels split at the weight's breakpoints and at the knots of any spline
    working models (or candidates) in ``models``, where the estimating
    function has kinks in a higher derivative.
    """
    breaks = list(getattr(weight, "breakpoints", ()))
    for m in models:
        knots = getattr(m, "knots", None)
        if knots is not None:
            breaks.extend(np.asarray(knots, dtype=float).tolist())
    return make_gauss_legendre(weight.support, n_nodes, breaks)
