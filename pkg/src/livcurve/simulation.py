"""Synthetic data with a known linear LIV curve, and a Monte Carlo study runner.

Data-generating process::

    (Y0, X) ~ N(0, I_5)
    Z | X   ~ TN(1.5 sign(alpha'X), sd 2, (-2, 2))
    T | X, Y0 ~ N(beta'X + Y0, 1)
    A = 1(Z >= T),  Y = Y0 + A psi T

so the LIV curve is ``gamma(t) = psi t`` and, with ``b = beta'x`` and
``c = (z - b) / sqrt(2)``::

    lambda(x, z) = Phi(c),   mu(x, z) = psi {b Phi(c) - sqrt(2) phi(c)}.
"""
from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special, stats

from .core import Observation, Sample, SupportSet, make_linear_origin_model, make_weight_tapered, make_weight_truncnorm
from .nuisance import (ConditionalDensity, ModelSpec, NuisanceSet, NuisanceSpec, RegressionFn, kang_schafer,
                       with_transforms)

log = logging.getLogger(__name__)

Z_SUPPORT = (-2.0, 2.0)
Z_LOC = 1.5
Z_SD = 2.0
WEIGHT_SUPPORT = SupportSet(-1.9, 1.9)
CSV_COLUMNS = ("variant", "n", "pi_ok", "lam_ok", "mu_ok", "bias", "bias_se", "sqrt_n_rmse", "coverage", "n_fail")


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    psi_true: float = 1.0
    alpha: tuple = (1.0, 1.0, -1.0, -1.0)
    beta: tuple = (1.0, -1.0, -1.0, 1.0)
    n_reps: int = 200
    pi_ok: bool = True
    lam_ok: bool = True
    mu_ok: bool = True
    variant: str = "DR"
    B: int = 0
    rng_seed: int = 0
    constant_effect: bool = False

    def __post_init__(self):
        if int(self.n) < 100:
            raise ValueError(f"n must be at least 100, got {self.n}")
        if int(self.n_reps) < 1:
            raise ValueError("n_reps must be at least 1")
        if len(self.alpha) != 4 or len(self.beta) != 4:
            raise ValueError("alpha and beta must have length 4")
        if self.variant.upper() not in ("DR", "IPW", "REG", "CROSSFIT"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class SimDraw:
    observation: Observation
    y0: float
    t: float


@dataclass(frozen=True)
class SimBatch(Sequence):
    """Generated data: the observed sample plus the latent ``y0`` and ``t``.

    Indexing yields :class:`SimDraw` records.
    """

    sample: Sample
    y0: np.ndarray
    t: np.ndarray

    def __len__(self):
        return self.sample.n

    def __getitem__(self, i):
        s = self.sample
        return SimDraw(Observation(s.x[i], s.z[i], s.a[i], s.y[i]), float(self.y0[i]), float(self.t[i]))


def _sign(u):
    return np.where(u >= 0, 1.0, -1.0)


def instrument_location(x, alpha=SimConfig.alpha):
    return Z_LOC * _sign(np.asarray(x) @ np.asarray(alpha, dtype=float))


def _truncnorm_draw(loc, sd, lo, hi, u):
    a = special.ndtr((lo - loc) / sd)
    b = special.ndtr((hi - loc) / sd)
    return np.clip(loc + sd * special.ndtri(a + u * (b - a)), lo, hi)


def generate(config: SimConfig, rng) -> SimBatch:
    """Draw ``config.n`` observations. ``rng`` is a Generator or a seed."""
    rng = np.random.default_rng(rng)
    n = int(config.n)
    base = rng.standard_normal((n, 5))
    y0, x = base[:, 0], base[:, 1:]
    z = _truncnorm_draw(instrument_location(x, config.alpha), Z_SD, *Z_SUPPORT, rng.uniform(size=n))
    t = x @ np.asarray(config.beta, dtype=float) + y0 + rng.standard_normal(n)
    a = (z >= t).astype(float)
    effect = np.full(n, config.psi_true) if config.constant_effect else config.psi_true * t
    y = y0 + a * effect
    return SimBatch(Sample(x, z, a, y), y0, t)


def true_nuisances(config: SimConfig = SimConfig()) -> NuisanceSet:
    """Analytic pi, lambda and mu for the data-generating process."""
    alpha = np.asarray(config.alpha, dtype=float)
    beta = np.asarray(config.beta, dtype=float)
    psi = float(config.psi_true)
    lo, hi = Z_SUPPORT

    def pi_raw(z, x):
        loc = instrument_location(x, alpha)
        dens = stats.truncnorm.pdf(z, (lo - loc) / Z_SD, (hi - loc) / Z_SD, loc=loc, scale=Z_SD)
        return np.where((z >= lo) & (z <= hi), dens, 0.0)

    def lam(x, z):
        return special.ndtr((z - x @ beta) / np.sqrt(2.0))

    def mu(x, z):
        b = x @ beta
        c = (z - b) / np.sqrt(2.0)
        if config.constant_effect:
            return psi * special.ndtr(c)
        return psi * (b * special.ndtr(c) - np.sqrt(2.0) * stats.norm.pdf(c))

    return NuisanceSet(ConditionalDensity(pi_raw, floor=1e-12, family="true"),
                       RegressionFn(lam, family="true"), RegressionFn(mu, family="true"))


def misspecify(sample: Sample, which: str) -> Sample:
    """Transformed copy of ``sample``.

    ``covariates`` replaces X by the Kang-Schafer transforms; ``lambda_link``
    additionally replaces Z by exp(Z) (pair it with a logit treatment model).
    The study runner uses the equivalent transform hooks of
    :func:`livcurve.nuisance.with_transforms` so that only the nuisance fits,
    not the estimating function, see transformed inputs.
    """
    if sample.d < 4:
        raise ValueError("misspecification needs at least 4 covariates")
    x = kang_schafer(sample.x)
    if which == "covariates":
        return Sample(x, sample.z, sample.a, sample.y, sample.v_indices)
    if which == "lambda_link":
        return Sample(x, np.exp(sample.z), sample.a, sample.y, sample.v_indices)
    raise ValueError(f"unknown misspecification mode {which!r}")


def correct_spec() -> NuisanceSpec:
    """Nuisance families that contain the truth for this process."""
    return NuisanceSpec(pi=ModelSpec("truncnorm_ml", options={"support": Z_SUPPORT}),
                        lam=ModelSpec("probit"), mu=ModelSpec("treatment_index", df=5))


def spec_for(pi_ok: bool, lam_ok: bool, mu_ok: bool, base: Optional[NuisanceSpec] = None) -> NuisanceSpec:
    spec = base or correct_spec()
    if not pi_ok:
        spec = with_transforms(spec, "pi")
    if not lam_ok:
        spec = with_transforms(spec, "lambda")
    if not mu_ok:
        spec = with_transforms(spec, "mu")
    return spec


def default_weight():
    """Truncated N(0, 1) on (-1.9, 1.9), cosine-tapered to vanish at the ends."""
    return make_weight_tapered(make_weight_truncnorm(0.0, 1.0, WEIGHT_SUPPORT), 0.1)


def default_estimator(config: SimConfig, weight=None, model=None) -> Callable[[Sample], np.ndarray]:
    """Closure mapping a sample to psi-hat for the configured cell."""
    from .estimators import cross_fit_estimate, estimate_variant

    weight = weight or default_weight()
    model = model or make_linear_origin_model()
    spec = spec_for(config.pi_ok, config.lam_ok, config.mu_ok)
    variant = config.variant.upper()

    def estimator(sample: Sample) -> np.ndarray:
        if variant == "CROSSFIT":
            return cross_fit_estimate(sample, model, weight, spec, v_folds=2, rng_seed=0).psi_hat
        return estimate_variant(sample, model, weight, spec, variant).psi_hat

    return estimator


def _replicate(cells, rep_seed, estimators):
    """Run every cell on one shared dataset; returns [(psi_hat, covered) or error string]."""
    from .inference import bootstrap_ci

    data_seed, boot_seed = rep_seed.spawn(2)
    sample = generate(cells[0], np.random.default_rng(data_seed)).sample
    out = []
    for cell, est in zip(cells, estimators):
        try:
            psi = float(est(sample)[0])
            covered = np.nan
            if cell.B > 0:
                ci = bootstrap_ci(sample, est, B=cell.B, rng_seed=boot_seed).ci[0]
                covered = float(ci[0] <= cell.psi_true <= ci[1])
            out.append((psi, covered))
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            out.append(f"{type(exc).__name__}: {exc}")
    return out


def _data_key(c: SimConfig):
    return (c.n, c.psi_true, tuple(c.alpha), tuple(c.beta), c.n_reps, c.rng_seed, c.constant_effect)


def run_study(cells: Sequence[SimConfig], n_jobs: int = 1, estimator_factory: Optional[Callable] = None) -> list:
    """Monte Carlo metrics per cell.

    Cells sharing ``(n, psi_true, alpha, beta, n_reps, rng_seed)`` reuse the
    same datasets, so their results are paired. Replicate ``r`` draws from
    the ``r``-th child of ``SeedSequence(rng_seed)``. Returns one dict per
    cell with keys :data:`CSV_COLUMNS`.
    """
    factory = estimator_factory or default_estimator
    groups = {}
    for i, c in enumerate(cells):
        groups.setdefault(_data_key(c), []).append(i)
    results = [None] * len(cells)
    for key, idx in groups.items():
        group = [cells[i] for i in idx]
        ests = [factory(c) for c in group]
        seeds = np.random.SeedSequence(group[0].rng_seed).spawn(group[0].n_reps)
        if n_jobs == 1:
            reps = [_replicate(group, s, ests) for s in seeds]
        else:
            from joblib import Parallel, delayed

            reps = Parallel(n_jobs=n_jobs)(delayed(_replicate)(group, s, ests) for s in seeds)
        for j, i in enumerate(idx):
            results[i] = _summarise(cells[i], [r[j] for r in reps])
    return results


def _summarise(cell: SimConfig, outcomes) -> dict:
    ok = [o for o in outcomes if not isinstance(o, str)]
    n_fail = len(outcomes) - len(ok)
    if n_fail > 0.05 * len(outcomes):
        log.warning("cell %s: %d of %d replicates failed", cell, n_fail, len(outcomes))
    err = np.array([p for p, _ in ok]) - cell.psi_true
    cov = np.array([c for _, c in ok])
    m = err.size
    return {
        "variant": cell.variant.upper(),
        "n": cell.n,
        "pi_ok": int(cell.pi_ok),
        "lam_ok": int(cell.lam_ok),
        "mu_ok": int(cell.mu_ok),
        "bias": float(err.mean()) if m else np.nan,
        "bias_se": float(err.std(ddof=1) / np.sqrt(m)) if m > 1 else np.nan,
        "sqrt_n_rmse": float(np.sqrt(cell.n * np.mean(err**2))) if m else np.nan,
        "coverage": float(np.nanmean(cov)) if m and np.isfinite(cov).any() else np.nan,
        "n_fail": n_fail,
    }


def standard_grid(n: int = 1000, n_reps: int = 200, B: int = 0, rng_seed: int = 0) -> list:
    """Three variants by four correctness patterns (all, pi wrong, regressions wrong, all wrong)."""
    patterns = [(True, True, True), (False, True, True), (True, False, False), (False, False, False)]
    return [SimConfig(n=n, n_reps=n_reps, B=B, rng_seed=rng_seed, variant=v, pi_ok=p, lam_ok=l, mu_ok=m)
            for p, l, m in patterns for v in ("IPW", "REG", "DR")]


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return str(v)
