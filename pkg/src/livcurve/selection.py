"""Doubly robust pseudo-risk and v-fold cross-validation over candidate curves.

For a candidate curve ``gamma_k`` the loss is::

    L(O) = int_T {f1(t, V) mu(X, t) - f2(t, V) lam(X, t)} dt
           + f1(Z, V) (Y - mu(X, Z)) / pi(Z | X) - f2(Z, V) (A - lam(X, Z)) / pi(Z | X)

with ``f1 = 2 d/dt(w gamma_k)`` and ``f2 = d/dt(w gamma_k^2)``. Its mean is the
pseudo-risk ``int w (gamma_k^2 - 2 gamma gamma_k) dP``, the weighted MSE of
``gamma_k`` up to a candidate-free shift.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Observation, Sample, SupportSet, WeightFunction, make_spline_model
from .nuisance import NuisanceSet, NuisanceSpec, fit_nuisances
from .quadrature import QuadratureRule, rule_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitScheme:
    assignments: np.ndarray
    v: int

    def train_test(self, fold: int):
        return np.flatnonzero(self.assignments != fold), np.flatnonzero(self.assignments == fold)


def make_split_scheme(n: int, v: int, rng_seed=None) -> SplitScheme:
    """Random partition of ``range(n)`` into ``v`` folds whose sizes differ by at most one."""
    v = int(v)
    if v < 2:
        raise ValueError(f"need at least 2 folds, got {v}")
    if v > n:
        raise ValueError(f"cannot split n={n} observations into {v} folds")
    perm = np.random.default_rng(rng_seed).permutation(n)
    assignments = np.empty(n, dtype=int)
    assignments[perm] = np.arange(n) % v
    assignments.setflags(write=False)
    return SplitScheme(assignments, v)


@dataclass(frozen=True)
class FittedCurve:
    """A candidate curve ``gamma_k(t, v)`` with its t-derivative."""

    gamma: Callable
    deriv_t: Callable
    name: str = "curve"


@dataclass
class RiskTable:
    names: list
    risks: np.ndarray
    selected: int
    fold_risks: np.ndarray = None
    failures: dict = field(default_factory=dict)

    def rows(self):
        return [(name, float(r), i == self.selected) for i, (name, r) in enumerate(zip(self.names, self.risks))]


def _loss_terms(curve: FittedCurve, weight: WeightFunction, t, v):
    g = curve.gamma(t, v)
    gd = curve.deriv_t(t, v)
    w = weight.eval(t, v)
    wd = weight.deriv_t(t, v)
    f1 = 2.0 * (wd * g + w * gd)
    f2 = wd * g * g + 2.0 * w * g * gd
    return f1, f2


def dr_loss(o, gamma_k: FittedCurve, eta: NuisanceSet, weight: WeightFunction,
            rule: Optional[QuadratureRule] = None) -> np.ndarray:
    """Doubly robust loss for one observation (scalar) or each row of a sample ``(n,)``."""
    from .estimators import evaluate_nuisances

    single = isinstance(o, Observation)
    sample = Sample.from_observations([o]) if single else o
    rule = rule or rule_for(weight)
    vals = evaluate_nuisances(sample, eta, rule)
    v = sample.v
    out = np.zeros(sample.n)
    if vals.lam_nodes is not None:
        if v is None:
            f1n, f2n = _loss_terms(gamma_k, weight, rule.nodes, None)
            out += vals.mu_nodes @ (rule.weights * f1n) - vals.lam_nodes @ (rule.weights * f2n)
        else:
            tn = np.broadcast_to(rule.nodes, (sample.n, rule.size))
            vn = np.broadcast_to(v[:, None, :], (sample.n, rule.size, v.shape[1]))
            f1n, f2n = _loss_terms(gamma_k, weight, tn, vn)
            out += (f1n * vals.mu_nodes - f2n * vals.lam_nodes) @ rule.weights
    if vals.pi_z is not None:
        f1z, f2z = _loss_terms(gamma_k, weight, sample.z, v)
        if vals.lam_z is None:
            out += (f1z * sample.y - f2z * sample.a) / vals.pi_z
        else:
            out += (f1z * (sample.y - vals.mu_z) - f2z * (sample.a - vals.lam_z)) / vals.pi_z
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("doubly robust loss is not finite")
    return out[0] if single else out


def spline_candidate(df: int, support: SupportSet):
    """Candidate closure: natural-spline working model with ``df`` degrees of freedom.

    The closure maps ``(train, eta, weight, rule)`` to a :class:`FittedCurve`
    by solving the estimating equation on the training data.
    """
    from .estimators import solve_psi

    model = make_spline_model(df, support)

    def fit(train: Sample, eta: NuisanceSet, weight: WeightFunction, rule: QuadratureRule) -> FittedCurve:
        psi = solve_psi(train, eta, model, weight, rule).psi_hat
        return FittedCurve(lambda t, v=None: model.basis(t, v) @ psi,
                           lambda t, v=None: model.basis_deriv_t(t, v) @ psi,
                           name=f"spline_df{df}")

    fit.name = f"spline_df{df}"
    fit.df = df
    fit.knots = model.knots
    return fit


def fixed_candidate(curve: FittedCurve):
    """Candidate closure that ignores the training data."""

    def fit(train, eta, weight, rule):
        return curve

    fit.name = curve.name
    return fit


def cv_select(sample: Sample, candidates: Sequence[Callable], specs: Optional[NuisanceSpec] = None, v: int = 2,
              weight: WeightFunction = None, rule: Optional[QuadratureRule] = None, rng_seed=None,
              fitter: Optional[Callable[[Sample], NuisanceSet]] = None) -> RiskTable:
    """Cross-validated pseudo-risk of each candidate; selects the minimiser.

    On every split the nuisances (``fitter`` or ``fit_nuisances(train, specs)``)
    and each candidate are fitted on the training folds and the loss is
    averaged over the held-out fold. A candidate that fails on any split gets
    infinite risk. Ties go to the earlier candidate.
    """
    if weight is None:
        raise ValueError("a weight function is required")
    if not candidates:
        raise ValueError("candidate list is empty")
    if len(candidates) > sample.n:
        warnings.warn("more candidates than observations", RuntimeWarning, stacklevel=2)
    if fitter is None:
        if specs is None:
            raise ValueError("either specs or fitter is required")
        fitter = lambda train: fit_nuisances(train, specs, "DR")  # noqa: E731
    rule = rule or rule_for(weight, models=candidates)
    scheme = make_split_scheme(sample.n, v, rng_seed)
    fold_risks = np.full((scheme.v, len(candidates)), np.inf)
    failures = {}
    for fold in range(scheme.v):
        train_idx, test_idx = scheme.train_test(fold)
        train, test = sample.subset(train_idx), sample.subset(test_idx)
        eta = fitter(train)
        for k, cand in enumerate(candidates):
            if k in failures:
                continue
            try:
                curve = cand(train, eta, weight, rule)
                fold_risks[fold, k] = float(np.mean(dr_loss(test, curve, eta, weight, rule)))
            except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
                log.warning("candidate %d failed on fold %d: %s", k, fold, exc)
                failures[k] = f"fold {fold}: {exc}"
    risks = fold_risks.mean(axis=0)
    risks[list(failures)] = np.inf
    if not np.isfinite(risks).any():
        raise RuntimeError(f"every candidate failed: {failures}")
    selected = int(np.argmin(risks))  # first minimiser on ties
    names = [getattr(c, "name", f"candidate{k}") for k, c in enumerate(candidates)]
    return RiskTable(names, risks, selected, fold_risks, failures)
