"""Estimating-equation estimators of the LIV working-model parameters.

The estimating function for one observation ``O = (X, Z, A, Y)`` is::

    phi(O; psi) = int_T {g1(t, V; psi) lam(X, t) - g2(t, V; psi) mu(X, t)} dt
                  + g1(Z, V; psi) (A - lam(X, Z)) / pi(Z | X)
                  - g2(Z, V; psi) (Y - mu(X, Z)) / pi(Z | X)

with ``g2 = d/dt {dgamma/dpsi * w}`` and ``g1 = d/dt {dgamma/dpsi * w * gamma}``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import LinearWorkingModel, Observation, Sample, WeightFunction, WorkingModel
from .nuisance import (REGRESSION_ONLY, ZERO, NuisanceFitError, NuisanceSet, NuisanceSpec,
                       fit_nuisances)
from .quadrature import QuadratureRule, default_step, numeric_deriv, rule_for

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
NEWTON_TOL = 1e-10
NEWTON_STEP_TOL = 1e-12
NEWTON_MAX_ITER = 100
COND_WARN = 1e10
COND_ERROR = 1e14
DENOM_GUARD = 1e-12


class EstimationError(RuntimeError):
    """The estimating equation could not be solved."""


class WeakInstrumentError(EstimationError):
    """The estimated threshold-density mass is numerically zero (instrumentation fails)."""


@dataclass
class EstimateResult:
    psi_hat: np.ndarray
    variant: str
    solver: str
    residual_norm: float
    iterations: int = 0
    covariance: Optional[np.ndarray] = None
    ci: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "psi_hat": self.psi_hat.tolist(),
            "se": None if self.se is None else self.se.tolist(),
            "ci": None if self.ci is None else np.asarray(self.ci).tolist(),
            "variant": self.variant,
            "solver": self.solver,
            "diagnostics": {"residual_norm": self.residual_norm, "iterations": self.iterations,
                            **self.diagnostics},
        }


# ---------------------------------------------------------------------------
# g functions

class GFunctions:
    """``g1`` and ``g2`` for a working model / weight pair.

    Analytic when the model supplies t-derivatives, central differences
    otherwise. Both vanish outside the open support. For linear models
    ``g1_star(z, v)`` (q x q) and ``g2_linear(z, v)`` are also available,
    with ``g1 = g1_star @ psi``.
    """

    def __init__(self, model: WorkingModel, weight: WeightFunction):
        self.model = model
        self.weight = weight
        self.support = weight.support
        self.is_linear = isinstance(model, LinearWorkingModel)

    def _mask(self, z, values):
        inside = self.support.interior(z)
        return np.where(inside[(...,) + (None,) * (values.ndim - inside.ndim)], values, 0.0)

    def _numeric(self, fn, z):
        return numeric_deriv(fn, z, default_step(z))

    def g2(self, z, v, psi) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        m, w = self.model, self.weight
        if m.has_t_derivatives:
            out = (m.d2_gamma_dt_dpsi(z, v, psi) * w.eval(z, v)[..., None]
                   + m.d_gamma_d_psi(z, v, psi) * w.deriv_t(z, v)[..., None])
        else:
            out = self._numeric(lambda s: m.d_gamma_d_psi(s, v, psi) * w.eval(s, v)[..., None], z)
        return self._mask(z, out)

    def g1(self, z, v, psi) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        m, w = self.model, self.weight
        if m.has_t_derivatives:
            gam = m.gamma(z, v, psi)
            ww = w.eval(z, v)
            grad = m.d_gamma_d_psi(z, v, psi)
            out = (m.d2_gamma_dt_dpsi(z, v, psi) * (ww * gam)[..., None]
                   + grad * (w.deriv_t(z, v) * gam)[..., None]
                   + grad * (ww * m.d_gamma_dt(z, v, psi))[..., None])
        else:
            out = self._numeric(
                lambda s: m.d_gamma_d_psi(s, v, psi) * (w.eval(s, v) * m.gamma(s, v, psi))[..., None], z)
        return self._mask(z, out)

    def g1_star(self, z, v) -> np.ndarray:
        if not self.is_linear:
            raise TypeError("g1_star is only defined for linear working models")
        z = np.asarray(z, dtype=float)
        h = self.model.basis(z, v)
        hd = self.model.basis_deriv_t(z, v)
        ww = self.weight.eval(z, v)[..., None, None]
        wd = self.weight.deriv_t(z, v)[..., None, None]
        outer = h[..., :, None] * h[..., None, :]
        cross = hd[..., :, None] * h[..., None, :]
        out = (cross + np.swapaxes(cross, -1, -2)) * ww + outer * wd
        return self._mask(z, out)

    def g2_linear(self, z, v) -> np.ndarray:
        if not self.is_linear:
            raise TypeError("g2_linear is only defined for linear working models")
        z = np.asarray(z, dtype=float)
        out = (self.model.basis_deriv_t(z, v) * self.weight.eval(z, v)[..., None]
               + self.model.basis(z, v) * self.weight.deriv_t(z, v)[..., None])
        return self._mask(z, out)


def build_g(model: WorkingModel, weight: WeightFunction) -> GFunctions:
    return GFunctions(model, weight)


# ---------------------------------------------------------------------------
# nuisance evaluation cache

@dataclass
class NuisanceValues:
    """Nuisance predictions needed by the estimating function.

    ``None`` entries encode the sentinels: no density (regression-only) or
    zero regressions (weighting-only).
    """

    lam_nodes: Optional[np.ndarray]  # (n, K)
    mu_nodes: Optional[np.ndarray]
    lam_z: Optional[np.ndarray]  # (n,)
    mu_z: Optional[np.ndarray]
    pi_z: Optional[np.ndarray]


def evaluate_nuisances(sample: Sample, eta: NuisanceSet, rule: QuadratureRule) -> NuisanceValues:
    x, z = sample.x, sample.z
    if eta.lam is ZERO:
        lam_nodes = mu_nodes = lam_z = mu_z = None
    else:
        xg = x[:, None, :]
        tg = rule.nodes[None, :]
        lam_nodes = np.broadcast_to(eta.lam.eval(xg, tg), (sample.n, rule.size))
        mu_nodes = np.broadcast_to(eta.mu.eval(xg, tg), (sample.n, rule.size))
        lam_z = np.broadcast_to(eta.lam.eval(x, z), (sample.n,))
        mu_z = np.broadcast_to(eta.mu.eval(x, z), (sample.n,))
    pi_z = None if eta.pi is REGRESSION_ONLY else np.broadcast_to(eta.pi.eval(z, x), (sample.n,))
    vals = NuisanceValues(lam_nodes, mu_nodes, lam_z, mu_z, pi_z)
    for name in ("lam_nodes", "mu_nodes", "lam_z", "mu_z", "pi_z"):
        arr = getattr(vals, name)
        if arr is not None and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"nuisance prediction {name} is not finite")
    if pi_z is not None and np.any(pi_z <= 0):
        raise FloatingPointError("instrument density is not positive at an observed (Z, X)")
    return vals


def _stack_values(parts, index_sets, n, k) -> NuisanceValues:
    """Scatter per-fold nuisance values back into full-sample arrays."""
    out = {}
    for name in ("lam_nodes", "mu_nodes", "lam_z", "mu_z", "pi_z"):
        if getattr(parts[0], name) is None:
            out[name] = None
            continue
        shape = (n, k) if name.endswith("nodes") else (n,)
        arr = np.empty(shape)
        for vals, idx in zip(parts, index_sets):
            arr[idx] = getattr(vals, name)
        out[name] = arr
    return NuisanceValues(**out)


# ---------------------------------------------------------------------------
# moment problem

class MomentProblem:
    """Weighted empirical mean of the estimating function, as a function of psi."""

    def __init__(self, sample: Sample, values: NuisanceValues, g: GFunctions, rule: QuadratureRule,
                 obs_weights: Optional[np.ndarray] = None):
        self.sample = sample
        self.values = values
        self.g = g
        self.rule = rule
        n = sample.n
        self.obs_weights = np.full(n, 1.0 / n) if obs_weights is None else np.asarray(obs_weights, float)
        self.has_v = sample.v is not None
        v = sample.v
        self.v_obs = v
        if self.has_v:
            self.v_nodes = np.broadcast_to(v[:, None, :], (n, rule.size, v.shape[1]))
            self.t_nodes = np.broadcast_to(rule.nodes[None, :], (n, rule.size))
        else:
            self.v_nodes = None
            self.t_nodes = rule.nodes
        vals = values
        if vals.pi_z is None:
            self.resid_a = self.resid_y = None
        elif vals.lam_z is None:
            self.resid_a = sample.a / vals.pi_z
            self.resid_y = sample.y / vals.pi_z
        else:
            self.resid_a = (sample.a - vals.lam_z) / vals.pi_z
            self.resid_y = (sample.y - vals.mu_z) / vals.pi_z

    @property
    def q(self) -> int:
        return self.g.model.dim_psi

    def _integral(self, g_nodes, reg_nodes):
        wts = self.rule.weights
        if g_nodes.ndim == 2:  # (K, q), shared by all observations
            return reg_nodes @ (wts[:, None] * g_nodes)
        return np.einsum("k,nkq,nk->nq", wts, g_nodes, reg_nodes)

    def eif_matrix(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=float).reshape(self.q)
        s, vals = self.sample, self.values
        out = np.zeros((s.n, self.q))
        if vals.lam_nodes is not None:
            g1n = self.g.g1(self.t_nodes, self.v_nodes, psi)
            g2n = self.g.g2(self.t_nodes, self.v_nodes, psi)
            integral = self._integral(g1n, vals.lam_nodes) - self._integral(g2n, vals.mu_nodes)
            if not np.all(np.isfinite(integral)):
                raise FloatingPointError("integral term of the estimating function is not finite")
            out += integral
        if self.resid_a is not None:
            g1z = self.g.g1(s.z, self.v_obs, psi)
            g2z = self.g.g2(s.z, self.v_obs, psi)
            resid = g1z * self.resid_a[:, None] - g2z * self.resid_y[:, None]
            if not np.all(np.isfinite(resid)):
                raise FloatingPointError("inverse-weighted residual term of the estimating function is not finite")
            out += resid
        return out

    def mean(self, psi) -> np.ndarray:
        return self.obs_weights @ self.eif_matrix(psi)

    def jacobian(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        jac = np.empty((self.q, self.q))
        for j in range(self.q):
            h = float(default_step(psi[j]))
            step = np.zeros(self.q)
            step[j] = h
            jac[:, j] = (self.mean(psi + step) - self.mean(psi - step)) / (2 * h)
        return jac

    def linear_system(self):
        """``(M, b)`` with mean estimating function ``M @ psi - b`` (linear models only)."""
        s, vals = self.sample, self.values
        q = self.q
        wt = self.obs_weights
        mat = np.zeros((q, q))
        vec = np.zeros(q)
        if vals.lam_nodes is not None:
            g1n = self.g.g1_star(self.t_nodes, self.v_nodes)
            g2n = self.g.g2_linear(self.t_nodes, self.v_nodes)
            rw = self.rule.weights
            if g1n.ndim == 3:
                lam_bar = wt @ vals.lam_nodes
                mu_bar = wt @ vals.mu_nodes
                mat += np.einsum("k,kij,k->ij", rw, g1n, lam_bar)
                vec += np.einsum("k,ki,k->i", rw, g2n, mu_bar)
            else:
                mat += np.einsum("k,nkij,nk,n->ij", rw, g1n, vals.lam_nodes, wt)
                vec += np.einsum("k,nki,nk,n->i", rw, g2n, vals.mu_nodes, wt)
        if self.resid_a is not None:
            g1z = self.g.g1_star(s.z, self.v_obs)
            g2z = self.g.g2_linear(s.z, self.v_obs)
            mat += np.einsum("nij,n->ij", g1z, wt * self.resid_a)
            vec += np.einsum("ni,n->i", g2z, wt * self.resid_y)
        return mat, vec


def _check_condition(mat: np.ndarray, what: str) -> float:
    cond = float(np.linalg.cond(mat))
    if not np.isfinite(cond) or cond > COND_ERROR:
        raise EstimationError(f"{what} is singular (condition number {cond:.3g})")
    if cond > COND_WARN:
        warnings.warn(f"{what} is ill-conditioned (condition number {cond:.3g})", RuntimeWarning, stacklevel=3)
    return cond


def _solve_problem(problem: MomentProblem, init=None, method: str = "auto"):
    q = problem.q
    if method == "auto":
        method = "closed_form" if problem.g.is_linear else "newton"
    if method == "closed_form":
        mat, vec = problem.linear_system()
        cond = _check_condition(mat, "closed-form matrix")
        if q == 1 and abs(mat[0, 0]) <= DENOM_GUARD:
            raise WeakInstrumentError(
                f"denominator {mat[0, 0]:.3g} is numerically zero; the instrument may be too weak "
                "on this support (instrumentation assumption)")
        psi = np.linalg.solve(mat, vec)
        # one step of iterative refinement against the summed estimating function
        psi = psi - np.linalg.solve(mat, problem.mean(psi))
        resid = float(np.linalg.norm(problem.mean(psi)))
        return psi, resid, 0, {"condition_number": cond, "d_matrix": mat}
    if method != "newton":
        raise ValueError(f"unknown solver method {method!r}")
    psi = np.zeros(q) if init is None else np.asarray(init, dtype=float).reshape(q).copy()
    if not np.all(np.isfinite(psi)):
        raise ValueError("initial value must be finite")
    f = problem.mean(psi)
    norm = float(np.linalg.norm(f))
    trace = [norm]
    it = 0
    step_size = np.inf
    # keep polishing past the residual tolerance until the step itself is negligible
    while it < NEWTON_MAX_ITER and (norm > NEWTON_TOL or step_size > NEWTON_STEP_TOL * (1.0 + np.linalg.norm(psi))):
        it += 1
        jac = problem.jacobian(psi)
        _check_condition(jac, "Newton Jacobian")
        step = np.linalg.solve(jac, -f)
        lam = 1.0
        while True:
            cand = psi + lam * step
            f_new = problem.mean(cand)
            n_new = float(np.linalg.norm(f_new))
            if n_new < norm or lam < 1e-8:
                break
            lam *= 0.5
        if n_new >= norm and norm <= NEWTON_TOL:
            break  # at rounding level; no further progress possible
        step_size = float(np.linalg.norm(cand - psi))
        psi, f, norm = cand, f_new, n_new
        trace.append(norm)
    if norm > NEWTON_TOL:
        raise EstimationError(f"Newton iteration did not converge in {it} steps; residual trace {trace}")
    return psi, norm, it, {"trace": trace}


# ---------------------------------------------------------------------------
# public operations

def eif(o, psi, eta: NuisanceSet, g: GFunctions, rule: QuadratureRule) -> np.ndarray:
    """Estimating function at ``psi`` for one observation or for every row of a sample.

    Returns shape ``(q,)`` for an :class:`Observation` and ``(n, q)`` for a
    :class:`Sample`.
    """
    single = isinstance(o, Observation)
    sample = Sample.from_observations([o]) if single else o
    problem = MomentProblem(sample, evaluate_nuisances(sample, eta, rule), g, rule)
    out = problem.eif_matrix(psi)
    return out[0] if single else out


def solve_psi(sample: Sample, eta: NuisanceSet, model: WorkingModel, weight: WeightFunction,
              rule: Optional[QuadratureRule] = None, init=None, method: str = "auto") -> EstimateResult:
    """Solve the empirical estimating equation for psi.

    ``method="auto"`` uses the closed form for linear working models and a
    Newton iteration (finite-difference Jacobian) otherwise.
    """
    if model.dim_psi > sample.n:
        raise ValueError(f"dim_psi={model.dim_psi} exceeds n={sample.n}")
    rule = rule or rule_for(weight, models=(model,))
    g = build_g(model, weight)
    problem = MomentProblem(sample, evaluate_nuisances(sample, eta, rule), g, rule)
    return _result_from_problem(problem, eta.variant, init, method)


def _result_from_problem(problem, variant, init, method) -> EstimateResult:
    psi, resid, it, diag = _solve_problem(problem, init, method)
    solver = "closed_form" if "d_matrix" in diag else "root_find"
    if resid > RESIDUAL_TOL:
        raise EstimationError(f"estimating-equation residual {resid:.3g} exceeds {RESIDUAL_TOL}")
    res = EstimateResult(psi, variant=variant, solver=solver, residual_norm=resid, iterations=it)
    if "condition_number" in diag:
        res.diagnostics["condition_number"] = diag["condition_number"]
    res._problem = problem
    return res


def estimate_constant(sample: Sample, eta: NuisanceSet, weight: WeightFunction,
                      rule: Optional[QuadratureRule] = None) -> EstimateResult:
    """Ratio estimator for the constant working model ``gamma(t; psi) = psi``.

    numerator   = int w'(t) m(t) dt + P_n{w'(Z) (Y - mu(X, Z)) / pi(Z|X)}
    denominator = int w'(t) l(t) dt + P_n{w'(Z) (A - lam(X, Z)) / pi(Z|X)}

    with ``m, l`` the sample-marginalised outcome and treatment regressions.
    """
    from .nuisance import marginalize

    rule = rule or rule_for(weight)
    wd_nodes = weight.deriv_t(rule.nodes)
    wd_z = weight.deriv_t(sample.z)
    num = den = 0.0
    if eta.lam is not ZERO:
        num += float(np.sum(rule.weights * wd_nodes * marginalize(eta.mu, sample, rule.nodes)))
        den += float(np.sum(rule.weights * wd_nodes * marginalize(eta.lam, sample, rule.nodes)))
    if eta.pi is not REGRESSION_ONLY:
        pi_z = eta.pi.eval(sample.z, sample.x)
        if eta.lam is ZERO:
            ry, ra = sample.y, sample.a
        else:
            ry = sample.y - eta.mu.eval(sample.x, sample.z)
            ra = sample.a - eta.lam.eval(sample.x, sample.z)
        num += float(np.mean(wd_z * ry / pi_z))
        den += float(np.mean(wd_z * ra / pi_z))
    if abs(den) <= DENOM_GUARD:
        raise WeakInstrumentError(
            f"ratio denominator {den:.3g} is numerically zero; the instrument may be too weak on this support")
    psi = np.array([num / den])
    from .core import make_spline_model
    problem = MomentProblem(sample, evaluate_nuisances(sample, eta, rule),
                            build_g(make_spline_model(1, weight.support), weight), rule)
    resid = float(np.linalg.norm(problem.mean(psi)))
    res = EstimateResult(psi, variant=eta.variant, solver="closed_form", residual_norm=resid,
                         diagnostics={"numerator": num, "denominator": den})
    res._problem = problem
    return res


def two_stage_ls(sample: Sample, eta: NuisanceSet, weight: WeightFunction,
                 rule: Optional[QuadratureRule] = None) -> EstimateResult:
    """Modified two-stage least squares with pseudo-instrument ``w'(Z)``.

    Stage 1 regresses ``A* = (A - lam)/pi + 1{w'(Z) != 0} / w'(Z) * int w'(t) lam(X, t) dt``
    on ``w'(Z)`` without intercept; stage 2 regresses the analogous ``Y*`` on
    the stage-1 fitted values. Rows with ``w'(Z) = 0`` drop out of both
    stages, so their integral terms are lost; the coefficient matches
    :func:`estimate_constant` exactly when ``w'(Z_i) != 0`` for every row.
    """
    rule = rule or rule_for(weight)
    wd_z = weight.deriv_t(sample.z)
    nonzero = wd_z != 0
    if not nonzero.any():
        raise EstimationError("w'(Z) is zero for every observation; stage 1 has no variation")
    n = sample.n
    a_star = np.zeros(n)
    y_star = np.zeros(n)
    if eta.pi is not REGRESSION_ONLY:
        pi_z = eta.pi.eval(sample.z, sample.x)
        if eta.lam is ZERO:
            a_star += sample.a / pi_z
            y_star += sample.y / pi_z
        else:
            a_star += (sample.a - eta.lam.eval(sample.x, sample.z)) / pi_z
            y_star += (sample.y - eta.mu.eval(sample.x, sample.z)) / pi_z
    if eta.lam is not ZERO:
        wd_nodes = rule.weights * weight.deriv_t(rule.nodes)
        xg, tg = sample.x[:, None, :], rule.nodes[None, :]
        int_lam = np.broadcast_to(eta.lam.eval(xg, tg), (n, rule.size)) @ wd_nodes
        int_mu = np.broadcast_to(eta.mu.eval(xg, tg), (n, rule.size)) @ wd_nodes
        inv = np.zeros(n)
        inv[nonzero] = 1.0 / wd_z[nonzero]
        a_star += inv * int_lam
        y_star += inv * int_mu
    if (~nonzero).any():
        log.info("two_stage_ls: %d observations have w'(Z)=0 and drop out", int((~nonzero).sum()))
    stage1 = float(wd_z @ a_star) / float(wd_z @ wd_z)
    a_hat = stage1 * wd_z
    ss = float(a_hat @ a_hat)
    if ss <= DENOM_GUARD**2 or abs(stage1) <= DENOM_GUARD:
        raise WeakInstrumentError("stage-1 coefficient is numerically zero; the instrument may be too weak")
    psi = np.array([float(a_hat @ y_star) / ss])
    return EstimateResult(psi, variant=eta.variant, solver="closed_form", residual_norm=float("nan"),
                          diagnostics={"stage1_coef": stage1, "n_zero_pseudo_instrument": int((~nonzero).sum())})


def estimate_variant(sample: Sample, model: WorkingModel, weight: WeightFunction, specs: NuisanceSpec,
                     variant: str = "DR", rule: Optional[QuadratureRule] = None, ipw_fill: str = "zero",
                     init=None) -> EstimateResult:
    """Fit the nuisances a variant needs on the full sample, then solve for psi."""
    eta = fit_nuisances(sample, specs, variant, ipw_fill=ipw_fill)
    return solve_psi(sample, eta, model, weight, rule, init=init)


def cross_fit_estimate(sample: Sample, model: WorkingModel, weight: WeightFunction, specs: NuisanceSpec,
                       v_folds: int = 2, rng_seed=None, rule: Optional[QuadratureRule] = None,
                       variant: str = "DR", fitter: Optional[Callable[[Sample], NuisanceSet]] = None,
                       init=None) -> EstimateResult:
    """Sample-splitting estimator.

    Nuisances are fitted on each training split and evaluated on its held-out
    fold; psi solves the average over splits of the fold-mean estimating
    function. ``fitter`` overrides the default ``fit_nuisances`` call.
    """
    from .selection import make_split_scheme

    if int(v_folds) < 2:
        raise ValueError(f"cross-fitting needs v_folds >= 2, got {v_folds}")
    rule = rule or rule_for(weight, models=(model,))
    scheme = make_split_scheme(sample.n, v_folds, rng_seed)
    fitter = fitter or (lambda train: fit_nuisances(train, specs, variant))
    parts, index_sets = [], []
    obs_weights = np.empty(sample.n)
    eta_variant = None
    for fold in range(scheme.v):
        test_idx = np.flatnonzero(scheme.assignments == fold)
        train_idx = np.flatnonzero(scheme.assignments != fold)
        try:
            eta = fitter(sample.subset(train_idx))
        except (NuisanceFitError, ValueError) as exc:
            raise NuisanceFitError(f"fold {fold} (training n={train_idx.size}): {exc}") from exc
        eta_variant = eta.variant
        parts.append(evaluate_nuisances(sample.subset(test_idx), eta, rule))
        index_sets.append(test_idx)
        obs_weights[test_idx] = 1.0 / (scheme.v * test_idx.size)
    values = _stack_values(parts, index_sets, sample.n, rule.size)
    problem = MomentProblem(sample, values, build_g(model, weight), rule, obs_weights=obs_weights)
    res = _result_from_problem(problem, "CROSSFIT", init, "auto")
    res.diagnostics["base_variant"] = eta_variant
    res.diagnostics["v_folds"] = scheme.v
    return res
