"""Covariate-balancing instrument propensity scores for complier effects.

The package estimates the average treatment effect for compliers by inverse
probability weighting with instrument propensity scores fitted to balance
chosen covariate functions exactly across the instrument groups, together
with comparator estimators, variance estimation, penalized balancing, and a
seeded Monte Carlo laboratory.
"""

__version__ = "0.1.0"

from .model import (
    BasisMatrix,
    BasisSpec,
    Dataset,
    FittedPropensity,
    LateEstimate,
    McMethodRow,
    McResult,
    Penalty,
    ValidationError,
    dataset_from_csv,
    dataset_to_csv,
    validate,
)
from .balancer import (
    SolverOptions,
    dual_objective,
    fit,
    fit_regularized,
    tailored_loss,
    tailored_loss_gradient,
    tailored_loss_hessian,
    weight_variance_proxy,
)
from .basis import (
    build_basis,
    cross_validate,
    orthonormalize,
    power_series_basis,
    raw_basis,
    spline_basis,
    standardize,
)
from .late import (
    EstimationError,
    MethodSpec,
    asymptotic_variance,
    bootstrap_se,
    estimate_ipw,
    estimate_method,
    estimate_tsls,
    estimate_wald,
    fit_mle_propensity,
    method_from_label,
    selection_augment,
)
from .simlab import McCell, RoyDesign, generate, run_mc, true_late, true_late_detail

__all__ = [
    "__version__",
    "BasisMatrix",
    "BasisSpec",
    "Dataset",
    "FittedPropensity",
    "LateEstimate",
    "McCell",
    "McMethodRow",
    "McResult",
    "MethodSpec",
    "Penalty",
    "RoyDesign",
    "SolverOptions",
    "ValidationError",
    "EstimationError",
    "asymptotic_variance",
    "bootstrap_se",
    "build_basis",
    "cross_validate",
    "dataset_from_csv",
    "dataset_to_csv",
    "dual_objective",
    "estimate_ipw",
    "estimate_method",
    "estimate_tsls",
    "estimate_wald",
    "fit",
    "fit_mle_propensity",
    "fit_regularized",
    "generate",
    "method_from_label",
    "orthonormalize",
    "power_series_basis",
    "raw_basis",
    "run_mc",
    "selection_augment",
    "spline_basis",
    "standardize",
    "tailored_loss",
    "tailored_loss_gradient",
    "tailored_loss_hessian",
    "true_late",
    "true_late_detail",
    "validate",
    "weight_variance_proxy",
]
