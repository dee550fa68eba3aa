"""Nuisance models: instrument density pi(z|x), treatment regression lambda(x, z)
and outcome regression mu(x, z).

Fitted objects evaluate on raw ``(x, z)`` with broadcasting: ``x`` has shape
``S + (d,)`` and ``z`` shape ``S``. Covariate / instrument transforms named in
a :class:`ModelSpec` are applied inside the fitted object, so callers never
transform data themselves.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy import optimize, stats

from .core import Sample, _natural_spline_basis, silverman_bandwidth

log = logging.getLogger(__name__)

DEFAULT_PI_FLOOR = 1e-3
LAMBDA_CLAMP = 1e-6
MIN_DENSITY_N = 30


class NuisanceFitError(RuntimeError):
    """A nuisance model could not be fitted to the supplied data."""


class _Sentinel:
    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return self.name


#: Stands in for pi-hat = infinity: inverse-weighted residual terms drop out.
REGRESSION_ONLY = _Sentinel("REGRESSION_ONLY")
#: Stands in for lambda-hat = 0 or mu-hat = 0.
ZERO = _Sentinel("ZERO")


# ---------------------------------------------------------------------------
# transforms

def kang_schafer(x):
    """Kang & Schafer (2007) covariate transforms applied to the first four columns."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise ValueError(f"Kang-Schafer transform needs 4 covariates, got {x.shape[-1]}")
    x1, x2, x3, x4 = (x[..., j] for j in range(4))
    out = np.stack([
        np.exp(x1 / 2.0),
        x2 / (1.0 + np.exp(x1)) + 10.0,
        (x1 * x3 / 25.0 + 0.6) ** 3,
        (x2 + x4 + 20.0) ** 2,
    ], axis=-1)
    if x.shape[-1] > 4:
        out = np.concatenate([out, x[..., 4:]], axis=-1)
    return out


TRANSFORMS = {
    None: None,
    "identity": None,
    "kang_schafer": kang_schafer,
    "exp": np.exp,
}


def _resolve(transform) -> Optional[Callable]:
    if callable(transform):
        return transform
    try:
        return TRANSFORMS[transform]
    except KeyError:
        raise ValueError(f"unknown transform {transform!r}; choose from {sorted(k for k in TRANSFORMS if k)}") from None


def _apply(fn, arr):
    return np.asarray(arr, dtype=float) if fn is None else np.asarray(fn(arr), dtype=float)


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class ModelSpec:
    """Family and hyperparameters for one nuisance function.

    Families: ``location_scale_kde`` / ``truncnorm_ml`` for the instrument
    density; ``probit`` / ``logit`` for the treatment regression;
    ``linear`` / ``spline_additive`` / ``treatment_index`` for the outcome
    regression. ``df`` > 2 swaps linear covariate terms for natural splines.
    """

    family: str
    df: int = 1
    x_transform: Union[str, Callable, None] = None
    z_transform: Union[str, Callable, None] = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.df) < 1 or int(self.df) > 20:
            raise ValueError(f"df must lie in 1..20, got {self.df}")
        _resolve(self.x_transform)
        _resolve(self.z_transform)


PI_FAMILIES = ("location_scale_kde", "truncnorm_ml")
LAMBDA_FAMILIES = ("probit", "logit")
MU_FAMILIES = ("linear", "spline_additive", "treatment_index")


@dataclass(frozen=True)
class NuisanceSpec:
    pi: ModelSpec = field(default_factory=lambda: ModelSpec("location_scale_kde"))
    lam: ModelSpec = field(default_factory=lambda: ModelSpec("probit"))
    mu: ModelSpec = field(default_factory=lambda: ModelSpec("spline_additive", df=5))
    pi_floor: float = DEFAULT_PI_FLOOR

    def __post_init__(self):
        for name, spec, allowed in (("pi", self.pi, PI_FAMILIES), ("lam", self.lam, LAMBDA_FAMILIES),
                                    ("mu", self.mu, MU_FAMILIES)):
            if spec.family not in allowed:
                raise ValueError(f"{name} family {spec.family!r} not in {allowed}")
        if not self.pi_floor > 0:
            raise ValueError("pi_floor must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "NuisanceSpec":
        d = dict(d or {})
        kwargs = {}
        for key in ("pi", "lam", "mu"):
            if key in d:
                sub = dict(d.pop(key))
                fam = sub.pop("family")
                kwargs[key] = ModelSpec(
                    family=fam, df=int(sub.pop("df", 1)),
                    x_transform=sub.pop("x_transform", None),
                    z_transform=sub.pop("z_transform", None),
                    options=sub.pop("options", {}) | sub)
        if "pi_floor" in d:
            kwargs["pi_floor"] = float(d.pop("pi_floor"))
        if d:
            raise ValueError(f"unknown nuisance spec keys: {sorted(d)}")
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# fitted objects

@dataclass(frozen=True)
class ConditionalDensity:
    raw: Callable
    floor: float = DEFAULT_PI_FLOOR
    family: str = "custom"

    def eval(self, z, x) -> np.ndarray:
        return np.maximum(self.raw(np.asarray(z, dtype=float), np.asarray(x, dtype=float)), self.floor)


@dataclass(frozen=True)
class RegressionFn:
    fn: Callable
    family: str = "custom"
    clamp: Optional[tuple] = None
    details: dict = field(default_factory=dict, compare=False, repr=False)

    def eval(self, x, z) -> np.ndarray:
        out = self.fn(np.asarray(x, dtype=float), np.asarray(z, dtype=float))
        if self.clamp is not None:
            out = np.clip(out, *self.clamp)
        return out


def constant_regression(value: float) -> RegressionFn:
    value = float(value)
    return RegressionFn(lambda x, z: np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(z)), value),
                        family="constant")


@dataclass(frozen=True)
class NuisanceSet:
    pi: object
    lam: object
    mu: object

    def __post_init__(self):
        if self.pi is ZERO:
            raise ValueError("pi cannot be ZERO; use REGRESSION_ONLY")
        if self.lam is REGRESSION_ONLY or self.mu is REGRESSION_ONLY:
            raise ValueError("REGRESSION_ONLY applies to pi only")
        if (self.lam is ZERO) != (self.mu is ZERO):
            raise ValueError("lambda and mu must both be fitted or both be ZERO")
        if self.pi is REGRESSION_ONLY and self.lam is ZERO:
            raise ValueError("at least one of pi or (lambda, mu) must be fitted")

    @property
    def variant(self) -> str:
        if self.pi is REGRESSION_ONLY:
            return "REG"
        if self.lam is ZERO:
            return "IPW"
        return "DR"


# ---------------------------------------------------------------------------
# design matrices

class _AdditiveDesign:
    """Intercept plus one term per covariate (and optionally z).

    Columns are standardised with training moments. ``df <= 2`` gives linear
    terms; larger ``df`` gives natural cubic splines with knots at training
    quantiles (``df - 1`` columns per variable).
    """

    def __init__(self, columns: np.ndarray, df: int):
        self.df = int(df)
        self.center = columns.mean(axis=0)
        scale = columns.std(axis=0)
        self.scale = np.where(scale > 0, scale, 1.0)
        self.splines = []
        std = (columns - self.center) / self.scale
        for j in range(columns.shape[1]):
            if self.df > 2 and np.unique(std[:, j]).size > self.df:
                knots = np.quantile(std[:, j], np.linspace(0, 1, self.df + 2)[1:-1])
                self.splines.append(_natural_spline_basis(knots)[0])
            else:
                self.splines.append(None)

    def __call__(self, columns: np.ndarray) -> np.ndarray:
        std = (columns - self.center) / self.scale
        parts = [np.ones(std.shape[:-1] + (1,))]
        for j, basis in enumerate(self.splines):
            if basis is None:
                parts.append(std[..., j:j + 1])
            else:
                parts.append(basis(std[..., j])[..., 1:])
        return np.concatenate(parts, axis=-1)


def _columns(x, z, x_fn, z_fn, include_z=True):
    xt = _apply(x_fn, x)
    if not include_z:
        return xt
    zt = _apply(z_fn, z)
    xt, zt = np.broadcast_arrays(xt, zt[..., None])
    return np.concatenate([xt, zt[..., :1]], axis=-1)


def _lstsq(design: np.ndarray, target: np.ndarray, what: str) -> np.ndarray:
    if design.shape[0] <= design.shape[1]:
        raise NuisanceFitError(f"{what}: n={design.shape[0]} not larger than {design.shape[1]} basis columns")
    coef, _, rank, sv = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1] or sv[-1] <= sv[0] * 1e-10:
        raise NuisanceFitError(f"{what}: rank-deficient design (rank {rank} of {design.shape[1]})")
    return coef


def _fit_binary(design: np.ndarray, target: np.ndarray, link: str, what: str):
    import statsmodels.api as sm
    from statsmodels.tools.sm_exceptions import ConvergenceWarning, PerfectSeparationWarning

    if target.min() == target.max():
        raise NuisanceFitError(f"{what}: only one outcome class present (complete separation)")
    model_cls = sm.Probit if link == "probit" else sm.Logit
    with warnings.catch_warnings():
        warnings.simplefilter("error", PerfectSeparationWarning)
        warnings.simplefilter("ignore", ConvergenceWarning)
        try:
            res = model_cls(target, design).fit(disp=0, maxiter=100)
        except (PerfectSeparationWarning, np.linalg.LinAlgError) as exc:
            raise NuisanceFitError(f"{what}: {link} fit failed ({exc})") from exc
        except Exception as exc:  # statsmodels raises PerfectSeparationError on older versions
            if "separation" in str(exc).lower():
                raise NuisanceFitError(f"{what}: {link} fit failed ({exc})") from exc
            raise
    info = res.mle_retvals
    if not info.get("converged", False) or not np.all(np.isfinite(res.params)):
        raise NuisanceFitError(
            f"{what}: {link} maximum likelihood did not converge after {info.get('iterations')} iterations; "
            f"max |coef| = {np.max(np.abs(res.params)):.3g} (possible separation)")
    return np.asarray(res.params), res


def _link_inverse(link: str):
    if link == "probit":
        return stats.norm.cdf
    return lambda eta: 0.5 * (1.0 + np.tanh(0.5 * eta))


# ---------------------------------------------------------------------------
# instrument density

def _truncnorm_logpdf(z, loc, scale, lo, hi):
    return stats.truncnorm.logpdf(z, (lo - loc) / scale, (hi - loc) / scale, loc=loc, scale=scale)


def fit_instrument_density(sample: Sample, spec: Union[NuisanceSpec, ModelSpec]) -> ConditionalDensity:
    """Fit pi(z | x).

    ``location_scale_kde`` models ``Z = pi1(X) + pi2(X) * eps`` with least
    squares for ``pi1``, log-link least squares on squared residuals for
    ``pi2**2`` and a Gaussian KDE for the density of the standardised
    residuals. ``truncnorm_ml`` fits a two-group truncated normal whose group
    comes from a probit classifier of ``Z > split`` on X.
    """
    floor = spec.pi_floor if isinstance(spec, NuisanceSpec) else DEFAULT_PI_FLOOR
    mspec = spec.pi if isinstance(spec, NuisanceSpec) else spec
    if sample.n < MIN_DENSITY_N:
        raise NuisanceFitError(f"instrument density needs at least {MIN_DENSITY_N} observations, got {sample.n}")
    x_fn = _resolve(mspec.x_transform)
    xt = _apply(x_fn, sample.x)
    design = _AdditiveDesign(xt, mspec.df)
    dmat = design(xt)
    z = sample.z

    if mspec.family == "location_scale_kde":
        beta = _lstsq(dmat, z, "instrument mean model")
        resid = z - dmat @ beta
        r2 = resid**2
        if r2.mean() <= 1e-12 * max(1.0, z.var()):
            raise NuisanceFitError("instrument density: degenerate residual variance")
        theta0 = np.zeros(dmat.shape[1])
        theta0[0] = np.log(r2.mean())

        def fun(theta):
            return np.exp(dmat @ theta) - r2

        def jac(theta):
            return dmat * np.exp(dmat @ theta)[:, None]

        sol = optimize.least_squares(fun, theta0, jac=jac, method="lm")
        theta = sol.x if sol.success and np.all(np.isfinite(sol.x)) else theta0
        scale_train = np.sqrt(np.exp(dmat @ theta))
        eps = resid / scale_train
        bw = mspec.options.get("bandwidth", "silverman")
        bw = silverman_bandwidth(eps) if bw == "silverman" else float(bw)
        if not bw > 0:
            raise NuisanceFitError("instrument density: non-positive KDE bandwidth")

        def raw(zz, xx):
            d = design(_apply(x_fn, xx))
            loc = d @ beta
            scale = np.sqrt(np.exp(d @ theta))
            e = (zz - loc) / scale
            dens = np.zeros(e.shape)
            flat_e = e.reshape(-1)
            out = dens.reshape(-1)
            for start in range(0, flat_e.size, 2048):
                chunk = flat_e[start:start + 2048]
                out[start:start + 2048] = stats.norm.pdf((chunk[:, None] - eps) / bw).mean(axis=1) / bw
            return out.reshape(e.shape) / scale

        return ConditionalDensity(raw, floor, family="location_scale_kde")

    if mspec.family == "truncnorm_ml":
        lo, hi = mspec.options.get("support", (z.min(), z.max()))
        lo, hi = float(lo), float(hi)
        if np.any(z < lo) or np.any(z > hi):
            raise NuisanceFitError(f"instrument values fall outside declared support ({lo}, {hi})")
        split = float(mspec.options.get("split", 0.5 * (lo + hi)))
        side = (z > split).astype(float)
        if side.min() == side.max():
            coef = None
            group = np.ones(sample.n, dtype=bool)
        else:
            coef, _ = _fit_binary(dmat, side, "probit", "instrument group classifier")
            group = dmat @ coef >= 0
        m1 = z[group].mean() if group.any() else z.mean()
        m0 = z[~group].mean() if (~group).any() else z.mean()
        s0 = z.std()
        if not s0 > 0:
            raise NuisanceFitError("instrument density: degenerate instrument variance")

        def nll(p):
            loc = np.where(group, p[0], p[1])
            return -_truncnorm_logpdf(z, loc, np.exp(p[2]), lo, hi).sum()

        sol = optimize.minimize(nll, np.array([m1, m0, np.log(s0)]), method="L-BFGS-B",
                                bounds=[(lo - 2 * (hi - lo), hi + 2 * (hi - lo))] * 2 + [(np.log(s0) - 5, np.log(s0) + 5)])
        if not np.all(np.isfinite(sol.x)):
            raise NuisanceFitError(f"truncated-normal ML failed: {sol.message}")
        loc1, loc0, scale = sol.x[0], sol.x[1], float(np.exp(sol.x[2]))

        def raw(zz, xx):
            if coef is None:
                g = np.ones(np.shape(xx)[:-1], dtype=bool)
            else:
                g = design(_apply(x_fn, xx)) @ coef >= 0
            loc = np.where(g, loc1, loc0)
            dens = np.exp(_truncnorm_logpdf(zz, loc, scale, lo, hi))
            return np.where((zz >= lo) & (zz <= hi), dens, 0.0)

        return ConditionalDensity(raw, floor, family="truncnorm_ml")

    raise ValueError(f"unknown instrument density family {mspec.family!r}")


# ---------------------------------------------------------------------------
# regressions

def fit_treatment_regression(sample: Sample, spec: Union[NuisanceSpec, ModelSpec]) -> RegressionFn:
    """Binary regression of A on (X, Z); predictions clamped to [1e-6, 1 - 1e-6]."""
    mspec = spec.lam if isinstance(spec, NuisanceSpec) else spec
    if mspec.family not in LAMBDA_FAMILIES:
        raise ValueError(f"unknown treatment family {mspec.family!r}")
    x_fn, z_fn = _resolve(mspec.x_transform), _resolve(mspec.z_transform)
    cols = _columns(sample.x, sample.z, x_fn, z_fn)
    design = _AdditiveDesign(cols, mspec.df)
    coef, res = _fit_binary(design(cols), sample.a, mspec.family, "treatment regression")
    inv = _link_inverse(mspec.family)

    def fn(x, z):
        return inv(design(_columns(x, z, x_fn, z_fn)) @ coef)

    # coefficients refer to standardised columns: raw slope = params[1:] / scale
    details = {"params": coef, "bse": np.asarray(res.bse), "center": design.center, "scale": design.scale,
               "cov": np.asarray(res.cov_params()), "design": design,
               "iterations": res.mle_retvals.get("iterations")}
    return RegressionFn(fn, family=mspec.family, clamp=(LAMBDA_CLAMP, 1 - LAMBDA_CLAMP), details=details)


def fit_outcome_regression(sample: Sample, spec: Union[NuisanceSpec, ModelSpec]) -> RegressionFn:
    """Least-squares regression of Y on (X, Z).

    ``linear`` and ``spline_additive`` are additive in the covariates and z.
    ``treatment_index`` first fits a probit of A on (X, Z) to obtain an index
    ``c``, then fits the varying-coefficient model ``s0(c) + z * s1(c)`` with
    natural splines ``s0, s1`` of ``df`` columns each.
    """
    mspec = spec.mu if isinstance(spec, NuisanceSpec) else spec
    x_fn, z_fn = _resolve(mspec.x_transform), _resolve(mspec.z_transform)
    cols = _columns(sample.x, sample.z, x_fn, z_fn)

    if mspec.family in ("linear", "spline_additive"):
        df = 1 if mspec.family == "linear" else max(mspec.df, 3)
        design = _AdditiveDesign(cols, df)
        coef = _lstsq(design(cols), sample.y, "outcome regression")

        def fn(x, z):
            return design(_columns(x, z, x_fn, z_fn)) @ coef

        return RegressionFn(fn, family=mspec.family)

    if mspec.family == "treatment_index":
        lin = _AdditiveDesign(cols, 1)
        gamma, _ = _fit_binary(lin(cols), sample.a, "probit", "outcome index model")
        index = lin(cols) @ gamma
        df = max(mspec.df, 3)
        knots = np.quantile(index, np.linspace(0, 1, df + 2)[1:-1]) if np.unique(index).size > df else None
        if knots is None:
            raise NuisanceFitError("outcome regression: index has too few distinct values")
        basis = _natural_spline_basis(knots)[0]
        zt = _apply(z_fn, sample.z)
        b = basis(index)
        coef = _lstsq(np.concatenate([b, zt[:, None] * b], axis=1), sample.y, "outcome regression")
        k = b.shape[1]

        def fn(x, z):
            c = _columns(x, z, x_fn, z_fn)
            bb = basis(lin(c) @ gamma)
            return bb @ coef[:k] + _apply(z_fn, z) * (bb @ coef[k:])

        return RegressionFn(fn, family="treatment_index")

    raise ValueError(f"unknown outcome family {mspec.family!r}")


def marginalize(reg: RegressionFn, sample: Sample, t, v=None) -> np.ndarray:
    """Average ``reg(X_i, t)`` over the sample (or over the ``V = v`` subgroup)."""
    x = sample.x
    if v is not None:
        keep = np.all(np.isclose(sample.v, np.asarray(v, dtype=float)), axis=1)
        if not keep.any():
            raise ValueError(f"no observations with V = {v}")
        x = x[keep]
    t = np.asarray(t, dtype=float)
    vals = reg.eval(x.reshape((x.shape[0],) + (1,) * t.ndim + (x.shape[1],)), t[None, ...])
    return vals.mean(axis=0)


# ---------------------------------------------------------------------------

def fit_nuisances(sample: Sample, spec: NuisanceSpec, variant: str = "DR",
                  ipw_fill: str = "zero") -> NuisanceSet:
    """Fit the nuisance functions a given estimator variant needs.

    ``variant`` is one of DR / IPW / REG. For IPW, ``ipw_fill="mean"`` plugs
    in the sample means of A and Y instead of zeros for lambda and mu.
    """
    variant = variant.upper()
    if variant not in ("DR", "IPW", "REG"):
        raise ValueError(f"unknown variant {variant!r}")
    pi = fit_instrument_density(sample, spec) if variant in ("DR", "IPW") else REGRESSION_ONLY
    if variant == "IPW":
        if ipw_fill == "mean":
            lam, mu = constant_regression(sample.a.mean()), constant_regression(sample.y.mean())
        elif ipw_fill == "zero":
            lam = mu = ZERO
        else:
            raise ValueError(f"ipw_fill must be 'zero' or 'mean', got {ipw_fill!r}")
    else:
        lam = fit_treatment_regression(sample, spec)
        mu = fit_outcome_regression(sample, spec)
    return NuisanceSet(pi, lam, mu)


def with_transforms(spec: NuisanceSpec, which: str) -> NuisanceSpec:
    """Return ``spec`` with misspecifying transforms switched on.

    ``which``: ``pi`` (Kang-Schafer covariates for the density), ``lambda``
    (Kang-Schafer covariates, exp(Z) and a logit link for the treatment
    regression), ``mu`` (Kang-Schafer covariates for the outcome regression)
    or ``lambda_mu`` (both regressions).
    """
    if which == "pi":
        return replace(spec, pi=replace(spec.pi, x_transform="kang_schafer"))
    if which == "lambda":
        return replace(spec, lam=replace(spec.lam, family="logit", x_transform="kang_schafer", z_transform="exp"))
    if which == "mu":
        return replace(spec, mu=replace(spec.mu, x_transform="kang_schafer"))
    if which == "lambda_mu":
        return with_transforms(with_transforms(spec, "lambda"), "mu")
    raise ValueError(f"unknown misspecification target {which!r}")
