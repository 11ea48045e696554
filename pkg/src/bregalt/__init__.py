"""Alternating left/right Bregman projections between non-convex sets."""

from .alternator import (Block, GapEstimate, RunConfig, Trace, detect_gap, dual_transform, run,
                         step_rl)
from .diagnostics import (AngleConditionProbe, RateEstimate, angle_condition_probe, angle_lr,
                          angle_rl, annotate, classify_transversality, fit_rate,
                          three_point_ell)
from .em import (DiscreteEmProblem, EmTrace, ExpFamilySpec, build_dspect_problem,
                 e_step_discrete, kl_expfam, m_step_discrete, run_dspect, run_em_discrete,
                 run_em_expfam)
from .estimators import BregmanAlternatingProjections, DiscreteEM, ExpFamilyEM
from .exceptions import (BregaltError, ConfigError, DegenerateBall, DomainError,
                         DomainViolation, EmptySample, InvalidModel, NotProjectedOn,
                         SolverFailure, TooShort)
from .geometry import (BregmanBall, CurvatureBounds, ReachEstimate, curvature_bounds,
                       estimate_reach, left_geodesic, proximal_normals, right_geodesic)
from .legendre import (DomainSpec, Generator, NormBounds, divergence, dual_divergence,
                       estimate_norm_bounds, euclidean, expfam, gaussian, get_generator,
                       mobile_norm, negentropy, poisson)
from .sets import (Affine, Ball, DataSetKL, DualAffine, FiniteSet, Parametric, Polyhedron,
                   ProjectionOptions, ProjectionResult, SetSpec, left_project,
                   local_left_project, local_right_project, right_project)

__version__ = "0.1.0"

__all__ = [
    "Block",
    "GapEstimate",
    "RunConfig",
    "Trace",
    "detect_gap",
    "dual_transform",
    "run",
    "step_rl",
    "AngleConditionProbe",
    "RateEstimate",
    "angle_condition_probe",
    "angle_lr",
    "angle_rl",
    "annotate",
    "classify_transversality",
    "fit_rate",
    "three_point_ell",
    "DiscreteEmProblem",
    "EmTrace",
    "ExpFamilySpec",
    "build_dspect_problem",
    "e_step_discrete",
    "kl_expfam",
    "m_step_discrete",
    "run_dspect",
    "run_em_discrete",
    "run_em_expfam",
    "BregmanAlternatingProjections",
    "DiscreteEM",
    "ExpFamilyEM",
    "BregaltError",
    "ConfigError",
    "DegenerateBall",
    "DomainError",
    "DomainViolation",
    "EmptySample",
    "InvalidModel",
    "NotProjectedOn",
    "SolverFailure",
    "TooShort",
    "BregmanBall",
    "CurvatureBounds",
    "ReachEstimate",
    "curvature_bounds",
    "estimate_reach",
    "left_geodesic",
    "proximal_normals",
    "right_geodesic",
    "DomainSpec",
    "Generator",
    "NormBounds",
    "divergence",
    "dual_divergence",
    "estimate_norm_bounds",
    "euclidean",
    "expfam",
    "gaussian",
    "get_generator",
    "mobile_norm",
    "negentropy",
    "poisson",
    "Affine",
    "Ball",
    "DataSetKL",
    "DualAffine",
    "FiniteSet",
    "Parametric",
    "Polyhedron",
    "ProjectionOptions",
    "ProjectionResult",
    "SetSpec",
    "left_project",
    "local_left_project",
    "local_right_project",
    "right_project",
]
