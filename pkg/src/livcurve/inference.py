"""Sandwich variance and percentile bootstrap intervals."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Sample
from .estimators import EstimationError, GFunctions, MomentProblem, evaluate_nuisances
from .nuisance import NuisanceSet
from .quadrature import QuadratureRule

log = logging.getLogger(__name__)

MAX_FAIL_FRACTION = 0.05


@dataclass
class VarianceEstimate:
    d_matrix: np.ndarray
    covariance: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def _sandwich(problem: MomentProblem, psi_hat) -> VarianceEstimate:
    psi_hat = np.asarray(psi_hat, dtype=float).reshape(problem.q)
    if problem.g.is_linear:
        d = problem.linear_system()[0]
    else:
        d = problem.jacobian(psi_hat)
    if not np.all(np.isfinite(d)) or np.linalg.cond(d) > 1e14:
        raise EstimationError("derivative matrix D is singular; sandwich variance undefined")
    phi = problem.eif_matrix(psi_hat)
    meat = (phi * problem.obs_weights[:, None]).T @ phi
    d_inv = np.linalg.inv(d)
    cov = d_inv @ meat @ d_inv.T / problem.sample.n
    return VarianceEstimate(d, 0.5 * (cov + cov.T))


def sandwich(sample: Sample, psi_hat, eta: NuisanceSet, g: GFunctions, rule: QuadratureRule) -> VarianceEstimate:
    """Plug-in covariance ``D^-1 P_n[phi phi^T] D^-T / n``.

    ``D`` is the derivative of ``psi -> P_n phi``: the closed-form matrix for
    linear working models, central differences otherwise.
    """
    problem = MomentProblem(sample, evaluate_nuisances(sample, eta, rule), g, rule)
    return _sandwich(problem, psi_hat)


def sandwich_for(result) -> VarianceEstimate:
    """Sandwich variance for an :class:`EstimateResult` from this package.

    Reuses the nuisance values (and cross-fitting weights) of the solve.
    """
    problem = getattr(result, "_problem", None)
    if problem is None:
        raise ValueError("result carries no estimating-equation state")
    return _sandwich(problem, result.psi_hat)


@dataclass
class BootstrapResult:
    ci: np.ndarray  # (q, 2)
    replicates: np.ndarray  # (B_ok, q)
    n_failed: int = 0
    failures: list = field(default_factory=list)


def _one_replicate(sample: Sample, estimator: Callable, seed_seq) -> tuple:
    rng = np.random.default_rng(seed_seq)
    idx = rng.integers(0, sample.n, sample.n)
    try:
        return np.atleast_1d(np.asarray(estimator(sample.subset(idx)), dtype=float)), None
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def bootstrap_ci(sample: Sample, estimator: Callable[[Sample], np.ndarray], B: int = 100, level: float = 0.95,
                 rng_seed=None, n_jobs: int = 1) -> BootstrapResult:
    """Nonparametric percentile bootstrap.

    ``estimator`` maps a resampled :class:`Sample` to psi-hat and should run
    the full pipeline, nuisance fits included. Replicate ``b`` draws from the
    ``b``-th child of ``SeedSequence(rng_seed)``, so results do not depend on
    ``n_jobs``. Failed replicates are dropped; more than 5% failures is an error.
    """
    B = int(B)
    if B < 50:
        raise ValueError(f"B must be at least 50, got {B}")
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    root = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    children = root.spawn(B)
    if n_jobs == 1:
        out = [_one_replicate(sample, estimator, c) for c in children]
    else:
        from joblib import Parallel, delayed

        out = Parallel(n_jobs=n_jobs)(delayed(_one_replicate)(sample, estimator, c) for c in children)
    reps = [r for r, _ in out if r is not None]
    failures = [(b, msg) for b, (_, msg) in enumerate(out) if msg is not None]
    if len(failures) > MAX_FAIL_FRACTION * B:
        raise EstimationError(f"{len(failures)} of {B} bootstrap replicates failed: {failures[:5]}")
    for b, msg in failures:
        log.info("bootstrap replicate %d dropped: %s", b, msg)
    reps = np.vstack(reps)
    alpha = 1.0 - level
    ci = np.quantile(reps, [alpha / 2, 1 - alpha / 2], axis=0).T
    return BootstrapResult(ci, reps, len(failures), failures)
