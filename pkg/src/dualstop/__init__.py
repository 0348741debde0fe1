"""Optimal stopping with portfolio choice under power utility, solved in the dual.

The dual value is an obstacle problem in the state-price variable, solved by
implicit finite differences with projected SOR.  The primal value, policy and
free boundaries are recovered by Legendre inversion and checked by Monte Carlo.
"""

from .config import ConfigError, RunConfig, load_config, parse_config, reference_config_path
from .dual import DualSolution, InvalidGrid, SolverConfig, build_grid, solve_dual, verify_bounds
from .model import (DomainError, HullData, ModelParams, NoConvergence, ParameterError,
                    classify_case, compute_hull, eval_dual_obstacle, eval_hull, eval_payoff)
from .montecarlo import (ConstantProportion, NumericalBlowup, SimConfig, SolverPolicy,
                         ZeroPolicy, bang_bang_limit, martingale_check, simulate_value)
from .primal import (PrimalSolution, RangeError, duality_round_trip, primal_value,
                     recover_primal, verify_primal_vi)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "RunConfig", "load_config", "parse_config", "reference_config_path",
    "DualSolution", "InvalidGrid", "SolverConfig", "build_grid", "solve_dual", "verify_bounds",
    "DomainError", "HullData", "ModelParams", "NoConvergence", "ParameterError",
    "classify_case", "compute_hull", "eval_dual_obstacle", "eval_hull", "eval_payoff",
    "ConstantProportion", "NumericalBlowup", "SimConfig", "SolverPolicy", "ZeroPolicy",
    "bang_bang_limit", "martingale_check", "simulate_value",
    "PrimalSolution", "RangeError", "duality_round_trip", "primal_value",
    "recover_primal", "verify_primal_vi",
]
