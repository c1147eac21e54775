"""Model-based geostatistical prevalence mapping.

Binomial, zero-inflated, and hurdle likelihoods over latent Gaussian
spatial and spatio-temporal fields, fitted by Monte Carlo maximum
likelihood, with plug-in prediction, exceedance mapping, multi-survey
bias correction, and intervention scale-up scenarios.
"""

from .covariance import CovarianceParams, correlation, cov_matrix
from .errors import (
    ConfigError,
    GeoprevError,
    HessianIndefinite,
    NoConvergence,
    ParseError,
    SingularInformation,
)
from .geometry import Location, Region, convex_hull, make_grid, pairwise_distances
from .inference import (
    FitControls,
    FitResult,
    fit,
    joint_log_density,
    laplace_marginal_loglik,
    laplace_mode,
    mala_sample,
    mcml_objective,
)
from .model import (
    Effects,
    LatentState,
    ModelSpec,
    ParameterVector,
    SurveyDataset,
    build_design,
    param_layout,
)
from .predict import (
    ExceedanceQuery,
    PredictionSurface,
    conditional_simulate,
    exceedance,
    prevalence_map,
    temporal_trend,
    village_prevalence,
)
from .scenario import (
    ScenarioComparison,
    ScenarioResult,
    ScenarioSpec,
    VillageFrame,
    run_comparison,
    run_scenario,
)
from .simulate import SimulationDesign, random_design, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CovarianceParams",
    "Effects",
    "ExceedanceQuery",
    "FitControls",
    "FitResult",
    "GeoprevError",
    "HessianIndefinite",
    "LatentState",
    "Location",
    "ModelSpec",
    "NoConvergence",
    "ParameterVector",
    "ParseError",
    "PredictionSurface",
    "Region",
    "ScenarioComparison",
    "ScenarioResult",
    "ScenarioSpec",
    "SimulationDesign",
    "SingularInformation",
    "SurveyDataset",
    "VillageFrame",
    "build_design",
    "conditional_simulate",
    "convex_hull",
    "correlation",
    "cov_matrix",
    "exceedance",
    "fit",
    "joint_log_density",
    "laplace_marginal_loglik",
    "laplace_mode",
    "make_grid",
    "mala_sample",
    "mcml_objective",
    "param_layout",
    "pairwise_distances",
    "prevalence_map",
    "random_design",
    "run_comparison",
    "run_scenario",
    "simulate_dataset",
    "temporal_trend",
    "village_prevalence",
]
