"""Nonlinear MPC with artificial potential fields for rule-aware automated driving."""

from .dynamics import Bounds, ControlInput, VehicleParams, VehicleState, rollout, step, step_jacobians
from .geometry import CenterlinePoint, MarkingKind, Side
from .nmpc import MpcWeights, OcpProblem, OcpSolution, SolverOptions, solve
from .potentials import EnvironmentSnapshot, PotentialConfig, SurroundingVehicle, total_field
from .road import RoadModel, build_reference, plan_global_path, query_environment

__version__ = "0.1.0"
