"""Collective steering of identical linear agents on GL+(n).

Synthesizes time-varying broadcast feedback gains ``K_t`` that move the
transition matrix of ``Phi' = (A + B K_t) Phi`` to a prescribed element of
GL+(n) in a prescribed time, steers ensemble covariances, builds a
contraction-based feedback for nonlinear rearrangements, and checks every
plan by independent simulation.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConditionNotMet,
    DomainError,
    IntegrationBlowUp,
    MatrixOverflowError,
    NonContractionError,
    NotInGLPlusError,
    PeriodizationError,
    SteeringError,
    TrajectoryLeavesGLPlus,
)
from .factorizer import (  # noqa: E402
    near_identity_factorize,
    rotation_to_three_spd,
    spd_cone_factorize,
    two_exponential_split,
)
from .planner import (  # noqa: E402
    CovarianceTask,
    GainSchedule,
    SteeringTask,
    eval_gain,
    plan,
    plan_covariance,
    plan_free_time,
    plan_single_segment,
    plan_strong,
)
from .segment import SteeringSegment, singularity_scan  # noqa: E402
from .simverify import SteeringReport, propagate_swarm, propagate_transition, verify  # noqa: E402
from .sysmod import (  # noqa: E402
    GramianEvaluator,
    LinearEnsemble,
    PeriodizedSystem,
    drift_gramian,
    gramian,
    gramian_ratio,
    kalman_rank_ok,
    periodize,
    periodized_with_gain,
)

__all__ = [
    "ConditionNotMet", "CovarianceTask", "DomainError", "GainSchedule", "GramianEvaluator",
    "IntegrationBlowUp", "LinearEnsemble", "MatrixOverflowError", "NonContractionError",
    "NotInGLPlusError", "PeriodizationError", "PeriodizedSystem", "SteeringError",
    "SteeringReport", "SteeringSegment", "SteeringTask", "TrajectoryLeavesGLPlus",
    "drift_gramian", "eval_gain", "gramian", "gramian_ratio", "kalman_rank_ok", "near_identity_factorize",
    "periodize", "periodized_with_gain", "plan", "plan_covariance", "plan_free_time",
    "plan_single_segment", "plan_strong", "propagate_swarm", "propagate_transition",
    "rotation_to_three_spd", "singularity_scan", "spd_cone_factorize",
    "two_exponential_split", "verify",
]
