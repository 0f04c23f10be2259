"""Asymptotic analysis of L2-regularized margin classifiers on spiked models.

The package predicts the exact proportional-limit (n/p fixed) precision of
margin classifiers (logistic, hinge, distance-weighted, unified-machine
losses), validates the predictions by training the actual classifiers on
simulated data, estimates spiked-model parameters from raw data, and selects
the loss and ridge penalty with the best predicted precision.
"""

from .losses import Loss, ProxError, dwd, lum, parse_loss, plr, svm
from .gauss import Expectations, QuadratureError, expectations
from .theory import (
    OrderParams,
    PopulationModel,
    PrecisionCurve,
    PrecisionPoint,
    ResolventError,
    default_lambda_grid,
    explicit_form_diagnostic,
    predict_precision,
    resolvent_moments,
    solve_general,
    solve_homogeneous,
    sweep_lambda,
)
from .simulate import (
    Dataset,
    FittedClassifier,
    GeneratorSpec,
    MonteCarloPoint,
    generate,
    monte_carlo_curve,
    objective,
    population_basis,
    population_precision,
    train,
)
from .estimate import (
    EstimationReport,
    debias_eigenvalue,
    detection_threshold,
    estimate_model,
    estimate_mu,
    estimate_sigma,
    estimate_spikes,
    overlap_correction,
)

__version__ = "0.1.0"

__all__ = [
    "Loss", "ProxError", "plr", "svm", "dwd", "lum", "parse_loss",
    "Expectations", "QuadratureError", "expectations",
    "PopulationModel", "OrderParams", "PrecisionPoint", "PrecisionCurve",
    "ResolventError", "resolvent_moments", "solve_homogeneous", "solve_general",
    "predict_precision", "sweep_lambda", "default_lambda_grid",
    "explicit_form_diagnostic",
    "GeneratorSpec", "Dataset", "FittedClassifier", "MonteCarloPoint",
    "generate", "population_basis", "train", "objective",
    "population_precision", "monte_carlo_curve",
    "EstimationReport", "estimate_sigma", "estimate_mu", "estimate_spikes",
    "estimate_model", "detection_threshold", "debias_eigenvalue",
    "overlap_correction",
    "__version__",
]
