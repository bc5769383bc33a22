"""Parallel real-time MPC with recursive feasibility guarantees.

Modules
-------
model        LTI systems, polyhedral sets, Riccati synthesis
contraction  contractive ellipsoids, tightened margins, shift certificates
qp           dense active-set QP, stage problems, consensus sweep
controller   the inner iteration, distance diagnostics, iteration bounds
simulation   reference solves, closed loops, performance accounting
chain        spring-mass-damper benchmark and its config files
io           design file export and import
"""
from .chain import BenchConfig, build_chain, chain_problem, load_config, parse_config
from .contraction import (
    ContractionDesign,
    TightenedMargins,
    max_inner_radius,
    synthesize,
    tighten_margins,
    verify_design,
)
from .controller import ControllerConfig, IterateTriple, delta, estimate_kappa, min_iterations, phi, rti_step, shift
from .errors import (
    EmptyMargin,
    Infeasible,
    InvalidBeta,
    MaxIterations,
    NoConvergence,
    NotContracting,
    NotContractive,
    NotStabilizable,
    RadiusTooLarge,
    RfmpcError,
    StageInfeasible,
)
from .model import LtiSystem, MpcProblem, PolyhedralSet, dare_solve, make_problem, spectral_radius
from .simulation import performance_gap, simulate_closed_loop, simulate_exact, solve_reference

__version__ = "0.1.0"

__all__ = [
    "BenchConfig", "build_chain", "chain_problem", "load_config", "parse_config",
    "ContractionDesign", "TightenedMargins", "max_inner_radius", "synthesize", "tighten_margins", "verify_design",
    "ControllerConfig", "IterateTriple", "delta", "estimate_kappa", "min_iterations", "phi", "rti_step", "shift",
    "EmptyMargin", "Infeasible", "InvalidBeta", "MaxIterations", "NoConvergence", "NotContracting",
    "NotContractive", "NotStabilizable", "RadiusTooLarge", "RfmpcError", "StageInfeasible",
    "LtiSystem", "MpcProblem", "PolyhedralSet", "dare_solve", "make_problem", "spectral_radius",
    "performance_gap", "simulate_closed_loop", "simulate_exact", "solve_reference",
]
