"""Equivalence tests for two parametric regression curves.

The public surface re-exported here covers the usual workflow: pick two
model families, load or simulate the group samples, fit them, and run one
of the asymptotic or constrained-bootstrap equivalence tests.
"""

from __future__ import annotations

from .constrain import ConstrainedFit, fit_constrained, select_null_params
from .data import GroupSample, load_samples_csv, sample_from_arrays, simulate_sample, write_samples_csv
from .equivalence import (
    BootstrapDistribution,
    Method,
    TestOutcome,
    band_extrema,
    bootstrap_distribution,
    bootstrap_quantile,
    test_band_iu,
    test_bootstrap,
    test_l2_asymptotic,
    test_sup_asymptotic,
)
from .errors import *  # noqa: F401,F403
from .fitting import FitResult, PairedFit, fit_ols, pair_fits
from .metrics import (
    Distance,
    SupResult,
    band_halfwidth,
    diff_profile,
    dist_l2sq,
    dist_sup,
    kernel_k,
    var_l2,
    var_sup_unique,
)
from .models import (
    CONSTANT,
    EMAX,
    EXPONENTIAL,
    LINEAR,
    QUADRATIC,
    ModelSpec,
    eval_gradient,
    eval_model,
    get_model,
    register_model,
)

__version__ = "0.1.0"


def schema_path(name: str):
    """Path of a shipped JSON schema (``test_outcome``, ``fit_report``, ``scenario_config``)."""
    from importlib.resources import files

    return files(__name__).joinpath("schemas", f"{name}.schema.json")
