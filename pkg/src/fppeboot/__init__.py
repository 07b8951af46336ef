"""Equilibrium computation and bootstrap inference for linear Fisher markets
and first-price pacing equilibria."""

from .errors import *  # noqa: F401,F403
from .market import (
    GeneratorSpec, MarketInstance, ValueDist, eval_empirical_objective, eval_item_objective,
    generate_market, load_market, save_market, subgradient,
)
from .solver import (
    ActiveSets, EquilibriumResult, SolverConfig, classify_buyers, recover_duals, solve,
    solve_fppe, solve_lfm,
)

__version__ = "0.1.0"
