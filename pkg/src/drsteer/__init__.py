"""Finite-horizon covariance steering with distributionally robust risk
constraints and optimal risk allocation."""

from .cone_constraints import (
    ConeDecompositionParams,
    SecondOrderConeSet,
    cone_membership,
    default_params,
    emit_cone_rows,
)
from .conic import (
    ConicProgram,
    ConicSolution,
    InfeasibleProgramError,
    SolverFailureError,
    SolverSettings,
    UnboundedProgramError,
    solve_conic,
)
from .config import ConfigError, ProblemConfig, preset
from .dr_ira import (
    IraConfig,
    IraTrace,
    classify,
    ira_solve,
    redistribute,
    tighten_inactive,
)
from .dynamics import (
    ConcatenatedSystem,
    DimensionError,
    LinearSystemSpec,
    MomentPair,
    NotPsdError,
    build_concatenation,
    propagate_covariance,
    propagate_mean,
    psd_sqrt,
    time_invariant_spec,
)
from .montecarlo import (
    MonteCarloSummary,
    NoiseModel,
    TrialResult,
    estimate,
    rollout,
    run_trials,
    sample,
    wilson_interval,
)
from .risk import (
    RISK_FLOOR,
    DomainError,
    HalfSpace,
    InfeasibleMeanError,
    RiskAllocation,
    dr_quantile,
    gaussian_quantile,
    tightening_offset,
    true_risk,
    uniform_allocation,
)
from .steering import (
    ControllerSolution,
    SteeringInfeasibleError,
    SteeringProblem,
    assemble,
    evaluate_cost,
    solve_lower_stage,
)

__version__ = "0.1.0"
