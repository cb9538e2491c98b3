"""Batch-size optimisation for closed systems of clients sharing batched servers.

Exact continuous-time Markov chains, mean-field (fluid) approximations,
event-driven simulation and speedup-law fitting.
"""

from .errors import (
    BatchMFError,
    ConfigError,
    DesignError,
    DomainError,
    FitError,
    IntegrationError,
    ModelError,
    NumericalError,
    StateSpaceTooLarge,
)
from .model import (
    MultiTypeConfig,
    SingleTypeConfig,
    SpeedupModel,
    TwoTypeConfig,
    check_subadditive,
    config_from_dict,
    load_config,
)
from .ctmc import build, optimize_batch_exact, solve_stationary
from .meanfield import fixed_point_single, fixed_point_two_type, optimal_k_asymptotic
from .simulate import mixing_curve
from .fitting import design_select, fit_speedup

__version__ = "0.1.0"
