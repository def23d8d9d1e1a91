"""Leader-follower stochastic LQ games with convex control constraints.

Lattice solvers for the projected adjoint systems, Riccati feedback for the
unconstrained case, a closed-loop memoryless leader solver, Monte Carlo
evaluation and a brute-force oracle for small trees.
"""

from .errors import (AssumptionViolated, BlowUp, MalformedSpec, NotConverged,
                     ProjectionNotConverged, SingularMatrix, StackgameError, ValidationFailed)
from .lattice import Lattice, NodeProcess
from .model import GameSpec, PiecewiseConstant, validate_spec
from .projection import (Box, EuclideanBall, FullSpace, Halfspace, Interval, NonnegativeOrthant,
                         WeightedMetric, project)

__version__ = "0.1.0"

__all__ = [
    "AssumptionViolated", "BlowUp", "Box", "EuclideanBall", "FullSpace", "GameSpec", "Halfspace",
    "Interval", "Lattice", "MalformedSpec", "NodeProcess", "NonnegativeOrthant", "NotConverged",
    "PiecewiseConstant", "ProjectionNotConverged", "SingularMatrix", "StackgameError",
    "ValidationFailed", "WeightedMetric", "project", "validate_spec",
]
