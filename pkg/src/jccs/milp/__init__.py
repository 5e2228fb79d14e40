"""Linear and mixed-integer programming: problem container, simplex,
branch and bound, and the ReLU network encoding."""

from .bnb import MilpOptions, relative_gap, solve_milp
from .encode import MlpEncoding, NeuronBounds, as_expr, encode_mlp, propagate_bounds
from .problem import (
    BINARY,
    CONTINUOUS,
    FEAS_TOL,
    GAP_TOL,
    INT_TOL,
    MilpProblem,
    MilpSolution,
    read_lp,
)
from .simplex import BoundedSimplex, LpRelaxation, solve_lp

__all__ = [
    "BINARY", "CONTINUOUS", "FEAS_TOL", "GAP_TOL", "INT_TOL",
    "BoundedSimplex", "LpRelaxation", "MilpOptions", "MlpEncoding", "MilpProblem",
    "MilpSolution", "NeuronBounds", "as_expr", "encode_mlp", "propagate_bounds",
    "read_lp", "relative_gap", "solve_lp", "solve_milp",
]
