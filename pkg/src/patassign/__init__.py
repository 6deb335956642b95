"""Ward assignment with transfers as an average-cost MDP: exact and approximate solvers plus simulation."""

from .model import (
    Action,
    ArrivalRegime,
    BoundedTransfer,
    DimensionError,
    InfeasibleAssignmentError,
    InstanceTooLargeError,
    ModelParams,
    NoTransfer,
    PostDecisionState,
    State,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ArrivalRegime",
    "BoundedTransfer",
    "DimensionError",
    "InfeasibleAssignmentError",
    "InstanceTooLargeError",
    "ModelParams",
    "NoTransfer",
    "PostDecisionState",
    "State",
    "__version__",
]
