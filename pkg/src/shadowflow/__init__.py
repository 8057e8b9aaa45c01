"""Desk-scale simulator of the finite-dimensional bubble flow for prescribed scalar curvature."""

from .bubbles import BubbleState, DomainError, da_eps, dlam_eps, eps_ij, interaction_matrix
from .config import ConfigError, RunConfig, preset
from .diagnostics import (
    EndReport,
    RateFit,
    classify_end,
    detect_tower,
    fit_exponential,
    index_at_infinity,
    toy_flow,
    verify_energy_monotone,
)
from .flow_field import (
    CutoffReport,
    FlowConstants,
    FlowSystem,
    FlowVelocity,
    b_alpha_correction,
    cutoffs,
    gate,
    in_V,
    smoothstep,
    velocity,
)
from .geometry import MorseField, builtin_field, check_nondegeneracy, find_critical_points, torus_distance
from .integrator import Event, IntegratorConfig, NumericFault, Trajectory, simulate, step
from .reduced_energy import (
    ExpansionConstants,
    PerturbationField,
    balance,
    energy,
    grad_a,
    grad_alpha,
    grad_lambda,
    solve_balanced_alpha,
)

__version__ = "0.1.0"
