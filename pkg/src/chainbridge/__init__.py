"""Schrödinger bridges, h-transforms and extremal paths for hypoelliptic chains."""

from .chain_model import (
    ChainSpec,
    LinearChainSpec,
    integrator_chain,
    kalman_rank_check,
    nonlinear_preset,
    preset,
    validate_chain,
)
from .costs import control_cost, path_space_kl, verify_prop4, verify_prop5
from .errors import (
    AbsoluteContinuityError,
    BridgeError,
    ConfigError,
    ConvergenceError,
    ExtrapolationError,
    InfeasibleError,
    InsufficientStatisticsError,
    NumericalError,
    PreconditionError,
)
from .extremal import lagrangian, lagrangian_h, prop6_check, solve_euler_lagrange
from .htransform import bridge_h, build_h, optimal_control, simulate_controlled
from .kernels import gaussian_kernel, mc_kernel, push_forward, tabulate_kernel
from .measures import GaussianMeasure, GridMeasure, Lattice
from .schrodinger import relative_entropy, solve_schrodinger_system

__all__ = [
    "AbsoluteContinuityError",
    "BridgeError",
    "ChainSpec",
    "ConfigError",
    "ConvergenceError",
    "ExtrapolationError",
    "GaussianMeasure",
    "GridMeasure",
    "InfeasibleError",
    "InsufficientStatisticsError",
    "Lattice",
    "LinearChainSpec",
    "NumericalError",
    "PreconditionError",
    "bridge_h",
    "build_h",
    "control_cost",
    "gaussian_kernel",
    "integrator_chain",
    "kalman_rank_check",
    "lagrangian",
    "lagrangian_h",
    "mc_kernel",
    "nonlinear_preset",
    "optimal_control",
    "path_space_kl",
    "preset",
    "prop6_check",
    "push_forward",
    "relative_entropy",
    "simulate_controlled",
    "solve_euler_lagrange",
    "solve_schrodinger_system",
    "tabulate_kernel",
    "validate_chain",
    "verify_prop4",
    "verify_prop5",
]

__version__ = "0.1.0"
