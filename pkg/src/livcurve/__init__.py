"""Doubly robust estimation of local instrumental variable curves."""
from .core import (LinearWorkingModel, Observation, Sample, SupportSet, WeightFunction, WorkingModel,
                   make_indicator_model, make_linear_origin_model, make_spline_model, make_weight_kde,
                   make_weight_tapered, make_weight_truncnorm)
from .estimators import (EstimateResult, EstimationError, WeakInstrumentError, build_g, cross_fit_estimate, eif,
                         estimate_constant, estimate_variant, solve_psi, two_stage_ls)
from .inference import bootstrap_ci, sandwich, sandwich_for
from .nuisance import (REGRESSION_ONLY, ZERO, ModelSpec, NuisanceFitError, NuisanceSet, NuisanceSpec,
                       fit_instrument_density, fit_nuisances, fit_outcome_regression, fit_treatment_regression,
                       marginalize)
from .quadrature import integrate, make_gauss_legendre, numeric_deriv
from .selection import RiskTable, SplitScheme, cv_select, dr_loss, make_split_scheme, spline_candidate

__version__ = "0.1.0"
