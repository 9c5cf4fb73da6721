"""Preference inference in entropy-regularized MDPs and continuous-time identifiability tools."""
from .errors import (
    ConvergenceWarning,
    DegenerateFieldError,
    InvalidArgumentError,
    InvertibilityError,
    NumericError,
    PreconditionError,
    SingularIntegrandError,
)
from .regmdp import (
    OccupancyMeasure,
    PreferenceParams,
    SoftSolution,
    TabularMdp,
    UtilityFamily,
    discounted_occupancy,
    policy_transition,
    soft_q_iteration,
    soft_value,
    softmax_policy,
)
from .likelihood import (
    GradientBundle,
    HessianAtTruth,
    evaluate,
    finite_diff_gradient,
    grad_likelihood,
    grad_q_tables,
    hessian_at_truth,
    log_likelihood,
)
from .mle import InferenceTrace, MleConfig, landscape_scan, run_mle
from .envs import FactorConfig, MertonConfig, merton_env, random_mdp, unhedgeable_env

__version__ = "0.1.0"
