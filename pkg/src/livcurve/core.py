"""Shared domain types: samples, support sets, weight functions and working models.

Array conventions used throughout the package: a threshold argument ``t`` may
have any shape ``S``; the matching effect-modifier argument ``v`` has shape
``S + (p,)`` (or is ``None`` when no modifiers are used). Working-model
gradients come back with shape ``S + (q,)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    z: float
    a: int
    y: float


@dataclass(frozen=True)
class Sample:
    """An iid sample of ``(X, Z, A, Y)`` plus the effect-modifier columns of X.

    Parameters
    ----------
    x : (n, d) array
        Covariates.
    z, a, y : (n,) arrays
        Instrument, binary treatment and outcome.
    v_indices : tuple of int
        Zero-based columns of ``x`` that act as effect modifiers ``V``.
    """

    x: np.ndarray
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    v_indices: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        z = np.asarray(self.z, dtype=float).ravel()
        a = np.asarray(self.a, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        n = z.shape[0]
        if n == 0:
            raise ValueError("sample is empty")
        if x.shape[0] != n or a.shape[0] != n or y.shape[0] != n:
            raise ValueError(
                f"length mismatch: x {x.shape[0]}, z {n}, a {a.shape[0]}, y {y.shape[0]}")
        for name, arr in (("x", x), ("z", z), ("a", a), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("treatment a must be 0/1")
        v_idx = tuple(int(j) for j in self.v_indices)
        for j in v_idx:
            if not 0 <= j < x.shape[1]:
                raise ValueError(f"effect-modifier index {j} outside covariate range 0..{x.shape[1] - 1}")
        for arr in (x, z, a, y):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "v_indices", v_idx)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def v(self) -> Optional[np.ndarray]:
        if not self.v_indices:
            return None
        return self.x[:, list(self.v_indices)]

    def subset(self, idx) -> "Sample":
        idx = np.asarray(idx)
        return Sample(self.x[idx], self.z[idx], self.a[idx], self.y[idx], self.v_indices)

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(self.x[i].copy(), float(self.z[i]), int(self.a[i]), float(self.y[i]))

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], v_indices=()) -> "Sample":
        obs = list(observations)
        if not obs:
            raise ValueError("sample is empty")
        dims = {np.atleast_1d(o.x).shape[0] for o in obs}
        if len(dims) != 1:
            raise ValueError(f"covariate dimension varies across observations: {sorted(dims)}")
        return cls(
            x=np.vstack([np.atleast_1d(o.x) for o in obs]),
            z=np.array([o.z for o in obs]),
            a=np.array([o.a for o in obs]),
            y=np.array([o.y for o in obs]),
            v_indices=v_indices,
        )


@dataclass(frozen=True)
class SupportSet:
    """Compact threshold set ``[t_lo, t_hi]``."""

    t_lo: float
    t_hi: float

    def __post_init__(self):
        lo, hi = float(self.t_lo), float(self.t_hi)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError("support endpoints must be finite")
        if not lo < hi:
            raise ValueError(f"support requires t_lo < t_hi, got ({lo}, {hi})")
        object.__setattr__(self, "t_lo", lo)
        object.__setattr__(self, "t_hi", hi)

    @property
    def width(self) -> float:
        return self.t_hi - self.t_lo

    def interior(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (t > self.t_lo) & (t < self.t_hi)


@dataclass(frozen=True)
class WeightFunction:
    """A projection weight ``w(t, v)`` that vanishes off the open support.

    ``interior`` and ``interior_deriv`` only need to be valid inside the
    support; ``eval`` and ``deriv_t`` zero everything else. ``breakpoints``
    lists interior points where the weight is less smooth; quadrature rules
    built for the weight start a new panel there.
    """

    interior: Callable
    interior_deriv: Callable
    support: SupportSet
    name: str = "custom"
    bandwidth: Optional[float] = None
    breakpoints: tuple = ()

    def eval(self, t, v=None) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        inside = self.support.interior(t)
        out = np.where(inside, self.interior(np.where(inside, t, self.support.t_lo), v), 0.0)
        return out

    def deriv_t(self, t, v=None) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        inside = self.support.interior(t)
        return np.where(inside, self.interior_deriv(np.where(inside, t, self.support.t_lo), v), 0.0)


class WorkingModel:
    """Parametric LIV curve ``gamma(t, v; psi)``.

    ``d_gamma_dt`` and ``d2_gamma_dt_dpsi`` are optional; when absent the
    t-derivatives needed by the estimating function are taken numerically.
    """

    def __init__(self, dim_psi: int, gamma: Callable, d_gamma_d_psi: Callable,
                 d_gamma_dt: Optional[Callable] = None,
                 d2_gamma_dt_dpsi: Optional[Callable] = None,
                 name: str = "custom"):
        if int(dim_psi) < 1:
            raise ValueError("dim_psi must be >= 1")
        self.dim_psi = int(dim_psi)
        self._gamma = gamma
        self._d_gamma_d_psi = d_gamma_d_psi
        self._d_gamma_dt = d_gamma_dt
        self._d2_gamma_dt_dpsi = d2_gamma_dt_dpsi
        self.name = name

    @property
    def has_t_derivatives(self) -> bool:
        return self._d_gamma_dt is not None and self._d2_gamma_dt_dpsi is not None

    def gamma(self, t, v, psi) -> np.ndarray:
        return self._gamma(np.asarray(t, dtype=float), v, np.asarray(psi, dtype=float))

    def d_gamma_d_psi(self, t, v, psi) -> np.ndarray:
        return self._d_gamma_d_psi(np.asarray(t, dtype=float), v, np.asarray(psi, dtype=float))

    def d_gamma_dt(self, t, v, psi) -> np.ndarray:
        return self._d_gamma_dt(np.asarray(t, dtype=float), v, np.asarray(psi, dtype=float))

    def d2_gamma_dt_dpsi(self, t, v, psi) -> np.ndarray:
        return self._d2_gamma_dt_dpsi(np.asarray(t, dtype=float), v, np.asarray(psi, dtype=float))

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, dim_psi={self.dim_psi})"


class LinearWorkingModel(WorkingModel):
    """Working model that is linear in psi: ``gamma(t, v; psi) = h(t, v) @ psi``."""

    def __init__(self, basis: Callable, basis_deriv_t: Callable, dim_psi: int,
                 name: str = "linear", knots: Optional[np.ndarray] = None):
        self.basis = basis
        self.basis_deriv_t = basis_deriv_t
        self.knots = knots
        super().__init__(
            dim_psi,
            gamma=lambda t, v, psi: basis(t, v) @ psi,
            d_gamma_d_psi=lambda t, v, psi: basis(t, v),
            d_gamma_dt=lambda t, v, psi: basis_deriv_t(t, v) @ psi,
            d2_gamma_dt_dpsi=lambda t, v, psi: basis_deriv_t(t, v),
            name=name,
        )


def _natural_spline_basis(knots: np.ndarray):
    """Truncated-power natural cubic spline basis with ``len(knots)`` columns.

    Columns are 1, t and ``d_j(t) - d_{K-1}(t)`` where
    ``d_j(t) = {(t - k_j)_+^3 - (t - k_K)_+^3} / (k_K - k_j)``.
    """
    knots = np.asarray(knots, dtype=float)
    big_k = knots.shape[0]
    last = knots[-1]

    def d(t, j, power):
        lead = np.maximum(t - knots[j], 0.0) ** power - np.maximum(t - last, 0.0) ** power
        return lead / (last - knots[j])

    def basis(t, v=None):
        t = np.asarray(t, dtype=float)
        cols = [np.ones_like(t), t]
        dk = d(t, big_k - 2, 3)
        for j in range(big_k - 2):
            cols.append(d(t, j, 3) - dk)
        return np.stack(cols, axis=-1)

    def deriv(t, v=None):
        t = np.asarray(t, dtype=float)
        cols = [np.zeros_like(t), np.ones_like(t)]
        dk = 3.0 * d(t, big_k - 2, 2)
        for j in range(big_k - 2):
            cols.append(3.0 * d(t, j, 2) - dk)
        return np.stack(cols, axis=-1)

    return basis, deriv


def make_spline_model(df: int, knots: SupportSet) -> LinearWorkingModel:
    """Natural cubic spline working model in t with ``df`` parameters.

    ``df=1`` is the constant model, ``df=2`` is ``(1, t)``, and ``df >= 3``
    places ``df`` knots equispaced over the support (boundary knots at the
    support ends), which gives exactly ``df`` basis functions including the
    intercept.
    """
    df = int(df)
    if df < 1:
        raise ValueError(f"spline df must be >= 1, got {df}")
    if df == 1:
        return LinearWorkingModel(
            basis=lambda t, v=None: np.ones(np.shape(t) + (1,)),
            basis_deriv_t=lambda t, v=None: np.zeros(np.shape(t) + (1,)),
            dim_psi=1, name="spline_df1")
    if df == 2:
        return LinearWorkingModel(
            basis=lambda t, v=None: np.stack([np.ones_like(np.asarray(t, float)), np.asarray(t, float)], -1),
            basis_deriv_t=lambda t, v=None: np.stack(
                [np.zeros_like(np.asarray(t, float)), np.ones_like(np.asarray(t, float))], -1),
            dim_psi=2, name="spline_df2")
    knot_pos = np.linspace(knots.t_lo, knots.t_hi, df)
    basis, deriv = _natural_spline_basis(knot_pos)
    return LinearWorkingModel(basis, deriv, dim_psi=df, name=f"spline_df{df}", knots=knot_pos)


def make_linear_origin_model() -> LinearWorkingModel:
    """``gamma(t; psi) = psi * t``, the curve shape of the synthetic design."""
    return LinearWorkingModel(
        basis=lambda t, v=None: np.asarray(t, float)[..., None],
        basis_deriv_t=lambda t, v=None: np.ones(np.shape(t) + (1,)),
        dim_psi=1, name="linear_origin")


def make_indicator_model(levels: Sequence[float], v_column: int = 0) -> LinearWorkingModel:
    """Effect constant in t but separate per level of one effect modifier.

    ``gamma(t, v; psi) = sum_j psi_j 1(v[v_column] == levels[j])``.
    """
    levels = np.asarray(levels, dtype=float)
    if levels.size == 0:
        raise ValueError("indicator model needs at least one level")

    def basis(t, v):
        if v is None:
            raise ValueError("indicator model requires effect modifiers V")
        col = np.asarray(v, dtype=float)[..., v_column]
        return (col[..., None] == levels).astype(float)

    def deriv(t, v):
        return np.zeros(np.shape(t) + (levels.size,))

    return LinearWorkingModel(basis, deriv, dim_psi=levels.size, name="indicator")


def make_weight_truncnorm(mu: float, sigma: float, support: SupportSet) -> WeightFunction:
    """Truncated-normal density on the support, zero outside.

    The density jumps to zero at the support ends; the derivative is the
    interior analytic one. See :func:`make_weight_tapered` for a C1 variant.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    mass = stats.norm.cdf(support.t_hi, mu, sigma) - stats.norm.cdf(support.t_lo, mu, sigma)

    def interior(t, v=None):
        return stats.norm.pdf(t, mu, sigma) / mass

    def interior_deriv(t, v=None):
        return -(t - mu) / sigma**2 * stats.norm.pdf(t, mu, sigma) / mass

    return WeightFunction(interior, interior_deriv, support, name="truncnorm")


def _cosine_taper(t, support: SupportSet, fraction: float):
    width = fraction * support.width
    s = np.minimum(t - support.t_lo, support.t_hi - t) / width
    sign = np.where(t - support.t_lo <= support.t_hi - t, 1.0, -1.0)
    inner = s < 1.0
    sc = np.clip(s, 0.0, 1.0)
    value = np.where(inner, 0.5 * (1.0 - np.cos(np.pi * sc)), 1.0)
    deriv = np.where(inner, 0.5 * np.pi * np.sin(np.pi * sc) / width * sign, 0.0)
    return value, deriv


def make_weight_tapered(base: WeightFunction, fraction: float = 0.1) -> WeightFunction:
    """Multiply a weight by a cosine taper that reaches zero at the support ends.

    The taper rises from 0 to 1 over ``fraction`` of the support width at each
    end, so the product and its first derivative are continuous on the real
    line. The result is not renormalised; scaling a weight leaves the
    projection unchanged.
    """
    if not 0 < fraction <= 0.5:
        raise ValueError(f"taper fraction must lie in (0, 0.5], got {fraction}")
    support = base.support

    def interior(t, v=None):
        taper, _ = _cosine_taper(t, support, fraction)
        return base.interior(t, v) * taper

    def interior_deriv(t, v=None):
        taper, dtaper = _cosine_taper(t, support, fraction)
        return base.interior_deriv(t, v) * taper + base.interior(t, v) * dtaper

    joins = (support.t_lo + fraction * support.width, support.t_hi - fraction * support.width)
    breaks = tuple(sorted(set(base.breakpoints) | set(joins)))
    return WeightFunction(interior, interior_deriv, support, name=f"tapered_{base.name}", breakpoints=breaks)


def silverman_bandwidth(values) -> float:
    values = np.asarray(values, dtype=float)
    sd = values.std(ddof=1) if values.size > 1 else 0.0
    iqr = np.subtract(*np.percentile(values, [75, 25])) / 1.349 if values.size > 1 else 0.0
    spread = min(sd, iqr) if min(sd, iqr) > 0 else max(sd, iqr)
    if spread <= 0:
        raise ValueError("cannot choose a bandwidth automatically for constant data")
    return 0.9 * spread * values.size ** (-0.2)


def make_weight_kde(sample, bandwidth="silverman", support: Optional[SupportSet] = None) -> WeightFunction:
    """Gaussian kernel density estimate of the marginal instrument density.

    Parameters
    ----------
    sample : Sample or array_like
        Source of instrument values.
    bandwidth : float or "silverman"
    support : SupportSet, optional
        Defaults to the central 95% empirical range of Z.
    """
    z = np.asarray(sample.z if isinstance(sample, Sample) else sample, dtype=float).ravel()
    if z.size == 0:
        raise ValueError("sample is empty")
    if isinstance(bandwidth, str):
        if bandwidth != "silverman":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        bw = silverman_bandwidth(z)
    else:
        bw = float(bandwidth)
        if not bw > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if support is None:
        lo, hi = np.quantile(z, [0.025, 0.975])
        support = SupportSet(lo, hi)

    def kernel_sum(t, fn):
        # evaluate on the distinct t values in chunks; t may be an (n, K) grid
        t = np.asarray(t, dtype=float)
        uniq, inv = np.unique(t.ravel(), return_inverse=True)
        out = np.empty(uniq.size)
        for start in range(0, uniq.size, 1024):
            u = (uniq[start:start + 1024, None] - z) / bw
            out[start:start + 1024] = fn(u).sum(axis=-1)
        return out[inv].reshape(t.shape)

    def interior(t, v=None):
        return kernel_sum(t, stats.norm.pdf) / (z.size * bw)

    def interior_deriv(t, v=None):
        return kernel_sum(t, lambda u: -u * stats.norm.pdf(u)) / (z.size * bw**2)

    return WeightFunction(interior, interior_deriv, support, name="kde", bandwidth=bw)
