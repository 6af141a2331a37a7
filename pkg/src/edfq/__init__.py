"""Many-server earliest-deadline-first queues with reneging.

Exact discrete-event simulation, a numerical solver for the fluid limit
equations, and a harness that compares the two as the server count grows.
"""

from .distributions import DomainError, Law, PatienceLaw, ServiceLaw, validate_assumptions
from .measures import FiniteMeasure, MeasurePath, ScalarPath, uniform_cdf_distance
from .skorohod import MvsmSolution, gamma, gamma_boundary, mvsm_solve
from .fluid import FluidData, FluidSolution, FluidState, SolverConfig, SolverError, fluid_step, fme_residuals, solve
from .simulator import SimConfig, SimTrace, check_pathwise_identities, compensator_diagnostic, simulate
from .harness import ConvergenceReport, ExperimentSpec, run_convergence, run_fcfs_equivalence, validate

__all__ = [
    "DomainError",
    "Law",
    "ServiceLaw",
    "PatienceLaw",
    "validate_assumptions",
    "FiniteMeasure",
    "MeasurePath",
    "ScalarPath",
    "uniform_cdf_distance",
    "MvsmSolution",
    "gamma",
    "gamma_boundary",
    "mvsm_solve",
    "FluidData",
    "FluidSolution",
    "FluidState",
    "SolverConfig",
    "SolverError",
    "solve",
    "fluid_step",
    "fme_residuals",
    "SimConfig",
    "SimTrace",
    "simulate",
    "check_pathwise_identities",
    "compensator_diagnostic",
    "ExperimentSpec",
    "ConvergenceReport",
    "run_convergence",
    "run_fcfs_equivalence",
    "validate",
]

__version__ = "0.1.0"
