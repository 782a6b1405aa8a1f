"""Backward receding successive convex approximation for obstacle-constrained LQR."""

from .clqr import DualState, backward_recursion, dual_ascent
from .lti import CostSpec, InputConstraint, LtiSystem
from .obstacles import Ellipse, ObstacleField, SemiConvexObstacle, check_trajectory_safe
from .planner import FEASIBLE, INFEASIBLE, BrscaConfig, BrscaResult, brsca_solve
from .scenario import Scenario, generate_scenario

__all__ = [
    "BrscaConfig",
    "BrscaResult",
    "CostSpec",
    "DualState",
    "Ellipse",
    "FEASIBLE",
    "INFEASIBLE",
    "InputConstraint",
    "LtiSystem",
    "ObstacleField",
    "Scenario",
    "SemiConvexObstacle",
    "backward_recursion",
    "brsca_solve",
    "check_trajectory_safe",
    "dual_ascent",
    "generate_scenario",
]
