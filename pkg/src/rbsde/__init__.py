"""Discounted stochastic control via randomized controls and penalized BSDEs."""

from .bsde import (
    DEFAULT_SCHEDULE,
    BSDESolution,
    FeedbackIntensity,
    RegressionBasis,
    StageResult,
    ValueCertificate,
    constraint_violation,
    dpp_residual,
    dual_value_check,
    feedback_intensity_from_file,
    optimal_intensity,
    solve_constrained_limit,
    solve_penalized_bsde,
)
from .errors import (
    AssumptionViolationError,
    ConfigError,
    ConstraintViolationError,
    DivergentPathsError,
)
from .experiment import (
    STAGES,
    ExperimentConfig,
    ExperimentResult,
    StageRecord,
    exact,
    experiment_config_from_dict,
    load_experiment_config,
    measured,
    run_experiment,
    unwrap,
)
from .hjb import (
    HJBSolution,
    SpatialGrid,
    compare_value,
    grid_to_csv,
    hjb_residual,
    solve_hjb_fd,
)
from .problem import (
    ControlSpace,
    GrowthConstants,
    PathFeatures,
    ProblemSpec,
    growth_constants,
    load_problem_config,
    problem_from_dict,
    validate_problem,
)
from .randomization import (
    ConstantIntensity,
    FunctionIntensity,
    IntensityControl,
    TwoLevelIntensity,
    ValueEstimate,
    action_quadrature,
    doleans_exponential,
    doleans_weights,
    estimate_randomized_reward,
    estimate_reward,
    intensity_from_config,
    random_intensity_controls,
    simulate_intensity_pair,
)
from .simulate import (
    MomentReport,
    PathEnsemble,
    TimeGrid,
    check_moment_bound,
    load_ensemble,
    path_rng,
    save_ensemble,
    simulate_controlled_paths,
    simulate_randomized_pair,
)
from .zoo import ZooProblem, zoo_get, zoo_list

__all__ = [
    "DEFAULT_SCHEDULE",
    "STAGES",
    "AssumptionViolationError",
    "BSDESolution",
    "ConfigError",
    "ConstantIntensity",
    "ConstraintViolationError",
    "ControlSpace",
    "ExperimentConfig",
    "ExperimentResult",
    "FeedbackIntensity",
    "FunctionIntensity",
    "GrowthConstants",
    "HJBSolution",
    "IntensityControl",
    "MomentReport",
    "PathEnsemble",
    "PathFeatures",
    "ProblemSpec",
    "DivergentPathsError",
    "RegressionBasis",
    "SpatialGrid",
    "StageRecord",
    "StageResult",
    "TimeGrid",
    "TwoLevelIntensity",
    "ValueCertificate",
    "ValueEstimate",
    "ZooProblem",
    "action_quadrature",
    "check_moment_bound",
    "compare_value",
    "constraint_violation",
    "doleans_exponential",
    "doleans_weights",
    "dpp_residual",
    "dual_value_check",
    "estimate_randomized_reward",
    "estimate_reward",
    "exact",
    "experiment_config_from_dict",
    "feedback_intensity_from_file",
    "grid_to_csv",
    "growth_constants",
    "hjb_residual",
    "intensity_from_config",
    "load_ensemble",
    "load_experiment_config",
    "load_problem_config",
    "measured",
    "optimal_intensity",
    "path_rng",
    "problem_from_dict",
    "random_intensity_controls",
    "run_experiment",
    "save_ensemble",
    "simulate_controlled_paths",
    "simulate_intensity_pair",
    "simulate_randomized_pair",
    "solve_constrained_limit",
    "solve_hjb_fd",
    "solve_penalized_bsde",
    "unwrap",
    "validate_problem",
    "zoo_get",
    "zoo_list",
]

__version__ = "0.1.0"
