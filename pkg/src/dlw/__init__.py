"""Density-ratio weighting for treatment effect estimation.

Fits autoregressive normalizing-flow density models to the covariates of
treated and control groups and weights control outcomes by the density ratio
p(x | treated) / p(x | control); includes classical baselines, a doubly-robust
wrapper, synthetic data generators, and a Monte Carlo experiment harness.
"""

__version__ = "0.1.0"

from .datagen import Dataset, DgpConfig, gen_setting  # noqa: E402,F401
from .estimators import (  # noqa: E402,F401
    att_base,
    att_dlw,
    att_doubly_robust,
    att_iptw,
    ate_dlw,
    fit_propensity_logistic,
)
from .flow import FitConfig, density_ratio, fit, load_model, save_model  # noqa: E402,F401
from .harness import ExperimentConfig, run_experiment  # noqa: E402,F401
from .outcome_models import att_ols_regression, fit_forest, fit_ols  # noqa: E402,F401
