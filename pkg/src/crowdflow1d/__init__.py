"""Congested gradient flow of a crowd density in a 1D weighted corridor.

The package simulates the minimizing-movement (JKO) scheme for the
energy ``J(rho) = integral D d(rho)`` under the hard congestion
constraint ``rho <= 1``, on a segment ``[a, R]`` with either a flat or a
radial integration weight and an optional absorbing exit at ``r = a``.
Exact 1D optimal transport utilities, a semi-analytic benchmark for the
radial corridor, and convergence/property study drivers round out the
library; the ``crowdflow1d.cli`` module exposes the same machinery on
the command line.
"""

from .corridor import (
    CorridorPreset,
    RadialProfile,
    chain_interface,
    closed_form_b,
    fig3_preset,
    fig4_preset,
    ode_b_exit,
    ode_b_no_exit,
    profile_no_exit,
    render,
    saturated_exit_preset,
    step_b_exit,
    step_b_no_exit,
)
from .errors import (
    ConfigError,
    CrowdflowError,
    DomainMismatchError,
    FeasibilityError,
    MassMismatchError,
    MonotonicityError,
    RegimeEndError,
    SolverFailureError,
    StiffnessError,
)
from .harness import SweepReport, convergence_study, momentum_rate_study, property_campaign
from .jko import (
    FlowTrajectory,
    JkoStepResult,
    PotentialD,
    energy,
    geodesic_interpolant,
    jko_step,
    momentum_discrepancy,
    momentum_fields,
    pressure_gradient,
    pressure_velocity_checks,
    run_flow,
)
from .measures import Domain1D, Measure1D, QuantileFn, density_of, quantile_of
from .transport import (
    Potential1D,
    TransportPlanSummary,
    dual_value,
    kantorovich_potential,
    w2_1d,
    w2_lp_oracle,
)

__all__ = [
    "ConfigError",
    "CorridorPreset",
    "CrowdflowError",
    "Domain1D",
    "DomainMismatchError",
    "FeasibilityError",
    "FlowTrajectory",
    "JkoStepResult",
    "MassMismatchError",
    "Measure1D",
    "MonotonicityError",
    "Potential1D",
    "PotentialD",
    "QuantileFn",
    "RadialProfile",
    "RegimeEndError",
    "SolverFailureError",
    "StiffnessError",
    "SweepReport",
    "TransportPlanSummary",
    "chain_interface",
    "closed_form_b",
    "convergence_study",
    "density_of",
    "dual_value",
    "energy",
    "fig3_preset",
    "fig4_preset",
    "geodesic_interpolant",
    "jko_step",
    "kantorovich_potential",
    "momentum_discrepancy",
    "momentum_fields",
    "momentum_rate_study",
    "ode_b_exit",
    "ode_b_no_exit",
    "pressure_gradient",
    "pressure_velocity_checks",
    "profile_no_exit",
    "property_campaign",
    "quantile_of",
    "render",
    "run_flow",
    "saturated_exit_preset",
    "step_b_exit",
    "step_b_no_exit",
    "w2_1d",
    "w2_lp_oracle",
]

__version__ = "0.1.0"
