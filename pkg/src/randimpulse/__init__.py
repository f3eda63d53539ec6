"""Entropy-regularized impulse control for 1-D diffusions."""

from .estimators import ClassicalImpulseSolver, RandomizedImpulseSolver, TDImpulseRegressor
from .exceptions import (
    Diverged,
    InsufficientData,
    InvalidSpec,
    NegativeIntensity,
    NoConvergence,
    NonFinite,
    ParseError,
    RandImpulseError,
    SingularSystem,
    WindowTooSmall,
)
from .fixed_point import SolveResult, lambda_sweep, solve_classical, solve_randomized
from .grid_fd import Grid1D, GridFn
from .model import (
    Affine,
    Constant,
    LambdaPair,
    ModelSpec,
    PiecewiseLinear,
    TwoSidedLinear,
    benchmark_default,
    validate_assumptions,
)
from .nonlocal_op import QuadratureRule, classical_M, jump_gibbs, randomized_M
from .td_learn import TrainConfig, ValueNet, train

__all__ = [
    "Affine",
    "ClassicalImpulseSolver",
    "Constant",
    "Diverged",
    "Grid1D",
    "GridFn",
    "InsufficientData",
    "InvalidSpec",
    "LambdaPair",
    "ModelSpec",
    "NegativeIntensity",
    "NoConvergence",
    "NonFinite",
    "ParseError",
    "PiecewiseLinear",
    "QuadratureRule",
    "RandImpulseError",
    "RandomizedImpulseSolver",
    "SingularSystem",
    "SolveResult",
    "TDImpulseRegressor",
    "TrainConfig",
    "TwoSidedLinear",
    "ValueNet",
    "WindowTooSmall",
    "benchmark_default",
    "classical_M",
    "jump_gibbs",
    "lambda_sweep",
    "randomized_M",
    "solve_classical",
    "solve_randomized",
    "train",
    "validate_assumptions",
]
