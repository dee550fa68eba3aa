import numpy as np
import pytest

from livcurve import Sample, SupportSet, make_weight_tapered, make_weight_truncnorm
from livcurve.nuisance import ConditionalDensity, NuisanceSet, RegressionFn

SUPPORT = SupportSet(-1.9, 1.9)


@pytest.fixture
def support():
    return SUPPORT


@pytest.fixture
def tn_weight():
    return make_weight_truncnorm(0.0, 1.0, SUPPORT)


@pytest.fixture
def tapered_weight():
    return make_weight_tapered(make_weight_truncnorm(0.0, 1.0, SUPPORT), 0.1)


def random_sample(rng, n=200, d=2, v_indices=()):
    """Synthetic sample with a monotone instrument effect on treatment."""
    x = rng.standard_normal((n, d))
    z = rng.uniform(-2.0, 2.0, n)
    a = (rng.uniform(size=n) < 1 / (1 + np.exp(-(z + 0.3 * x[:, 0])))).astype(float)
    y = x[:, 0] + a * (1 + 0.5 * z) + rng.standard_normal(n)
    return Sample(x, z, a, y, v_indices)


def smooth_nuisances(rng, d=2):
    """Hand-specified smooth nuisances with random coefficients."""
    c = rng.uniform(0.5, 1.5, 3)
    b = rng.normal(size=d) * 0.3

    def lam(x, z):
        return 1 / (1 + np.exp(-(c[0] * z + x @ b)))

    def mu(x, z):
        return c[1] * z**2 * lam(x, z) + x @ b + c[2] * np.sin(z)

    def pi(z, x):
        return 0.25 + 0.05 * np.tanh(x[..., 0]) * z / 2

    return NuisanceSet(ConditionalDensity(pi, floor=1e-3), RegressionFn(lam), RegressionFn(mu))


# --- acceptance reporting ---------------------------------------------------------------

_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
