"""Cross-validated model selection for GMM-estimated models.

Subpackages:
    core        moment models, weighting, one-step GMM estimation
    selection   (k,r)-fold CV, GMM minimand, GMM-AIC/BIC criteria
    hypothesis  the R_CV equal-fit test and its variance estimators
    ivlab       linear IV misspecification Monte-Carlo study
    conduct     logit-demand collusion detection Monte-Carlo study
    mpec        CV for equality-constrained (MPEC) estimation
    experiments config-driven experiment harness
    cli         command-line entry point
"""

from .core import (
    Dataset,
    EstimationError,
    GmmEstimate,
    MomentModel,
    OptimizerConfig,
    WeightingSpec,
    estimate,
    evaluate_objective,
    resolve_weighting,
)
from .selection import (
    CvReport,
    CriterionResult,
    SplitPlan,
    cross_validate,
    gmm_aic,
    gmm_bic,
    make_splits,
    select_by_gmm_minimand,
    select_by_information_criterion,
    train_on_subset,
    validate_on_complement,
)
from .hypothesis import (
    TestResult,
    VarianceEstimate,
    collect_split_moments,
    compute_rcv,
    estimate_variance_general,
    estimate_variance_independent,
)
from .mpec import (
    ConstrainedEstimate,
    ConstrainedModel,
    cross_validate_mpec,
    estimate_mpec,
    validate_mpec,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EstimationError",
    "GmmEstimate",
    "MomentModel",
    "OptimizerConfig",
    "WeightingSpec",
    "estimate",
    "evaluate_objective",
    "resolve_weighting",
    "CvReport",
    "CriterionResult",
    "SplitPlan",
    "cross_validate",
    "gmm_aic",
    "gmm_bic",
    "make_splits",
    "select_by_gmm_minimand",
    "select_by_information_criterion",
    "train_on_subset",
    "validate_on_complement",
    "TestResult",
    "VarianceEstimate",
    "collect_split_moments",
    "compute_rcv",
    "estimate_variance_general",
    "estimate_variance_independent",
    "ConstrainedEstimate",
    "ConstrainedModel",
    "cross_validate_mpec",
    "estimate_mpec",
    "validate_mpec",
    "__version__",
]
