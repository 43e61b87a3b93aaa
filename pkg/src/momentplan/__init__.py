"""Chance-constrained trajectory planning via moments and tail bounds.

Layers, bottom up:

- polyalg:     sparse polynomial algebra and the expectation rewriter
- distmoments: moment tables for Gaussians, truncated Gaussians, mixtures
- riskbounds:  concentration-inequality bounds, mixture bounding, allocation
- bodyframe:   the collision constraint's mean/variance in the planned frame
- mpcc:        reference path, contouring errors, bicycle model, stage cost
- sqp:         dense-NLP SQP solver (l1 merit, damped block BFGS, OSQP QPs)
- planner:     problem assembly, solve, independent feasibility checking
- harness:     scenarios, Monte Carlo validation, batch experiments, plots
- cli:         command-line front end
"""

from .distmoments import (
    GaussianMixture,
    GaussianSpec,
    MixturePrediction,
    MomentTable,
    TruncatedGaussianSpec,
    empirical_moments,
    gaussian_moments,
    interpolate_prediction,
    mixture_moments,
    truncate_prediction,
    truncated_gaussian_moments,
)
from .bodyframe import (
    AgentGeometry,
    CollisionEllipsoid,
    Pose,
    agent_circles,
    body_frame_constraint,
    constraint_mean_variance,
    ellipsoid_from_geometry,
)
from .mpcc import (
    Control,
    CostParams,
    EgoState,
    ReferencePath,
    VehicleParams,
    arc_length_scale,
    bicycle_derivative,
    contouring_errors,
    path_heading,
    path_point,
    rk4_step,
    stage_cost,
)
from .planner import (
    AgentChannel,
    PlanProblem,
    PlanResult,
    SolverSettings,
    assemble_nlp,
    check_feasibility,
    initial_guess,
    solve,
)
from .polyalg import (
    DependencyStructure,
    MomentExpression,
    Polynomial,
    VariableRoster,
    expectation,
    mean_variance_expressions,
    poly_mul,
    poly_pow,
    render,
    substitute,
)
from .riskbounds import (
    ConcKind,
    RiskAllocation,
    RiskBound,
    aggregate_boole,
    conc,
    conc_boundary_value,
    mixture_bound,
    uniform_allocation,
)

__version__ = "0.1.0"
