"""Multi-task low-rank reward learning from pairwise preferences, with offline pessimistic policies."""

from .core_math import kappa, likelihood_bracket, log_likelihood, reg_nll_value_grad, sigmoid_link
from .estimators import (
    ConvergenceError,
    EstimateBundle,
    SolverSettings,
    information_matrix,
    joint_lowrank_mle,
    single_task_mle,
    subspace_mle,
)
from .pipelines import AlgorithmParams, RunReport, calibrate_alpha, run_active, run_known
from .policy import ConfidenceEllipsoid, Policy, coverage_coefficient, evaluate_suboptimality, pessimistic_policy
from .relevance import AllocationPlan, LassoProblem, active_sample, lasso_relevance
from .tasks import (
    ComparisonDataset,
    InstanceConfig,
    MultiTaskInstance,
    fisher_matrix,
    generate_instance,
    min_l1_relevance,
    representation_constant,
    sample_dataset,
)

__version__ = "0.1.0"
