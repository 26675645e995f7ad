"""Numerical laboratory for Carleman-weighted stability of a coupled
forward-backward parabolic system: grids and Neumann calculus, the two weight
families, estimate evaluators, stability experiments, and a config-driven CLI.
"""

from .errors import (
    ConfigError,
    ConstructionError,
    ContractViolation,
    DivergenceError,
    StagnationError,
)
from .grids import (
    ScalarField,
    SpaceTimeGrid,
    SubdomainMask,
    gradient_neumann,
    h21_norm,
    integrate_q,
    laplacian_neumann,
    second_derivative,
    spatial_norm_at,
    time_derivative,
    zeros_field,
)
from .functionals import (
    EstimateReport,
    SweepResult,
    check_w1_identities,
    eval_est21,
    eval_est22_bound,
    eval_est42,
    eval_est44,
    eval_lem31,
    eval_lem32,
    eval_thm21,
    eval_thm32,
    fit_exponential_rate,
    sweep,
    time_reversal_defect,
)
from .stability import (
    QRProblem,
    StabilityRun,
    conditional_corollary_experiment,
    fit_power_law,
    holder_experiment,
    lipschitz_experiment,
    make_observation,
    reconstruct_qr,
)
from .system import (
    CoefficientSet,
    ModeSpec,
    SolutionPair,
    manufactured_pair,
    residual_u,
    residual_v,
    solve_coupled,
    time_reverse,
)
from .weights import (
    EtaFunction,
    SpaceTimeWeight,
    TimeWeight,
    build_eta,
    mu0,
    s_star,
    theta_exponent,
)

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
