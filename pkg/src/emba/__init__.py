"""Event-based mosaicing bundle adjustment.

Joint refinement of a rotating event camera's orientation trajectory and a
panoramic brightness-gradient map, Poisson reconstruction of the intensity
panorama, and a forward event simulator for ground truth.
"""

__version__ = "0.1.0"

from .geometry import CameraModel, exp_so3, log_so3, project_equirect, unproject_equirect
from .trajectory import Trajectory, read_trajectory, write_trajectory
from .events import EventArray, read_events, write_events
from .panorama import GradientMap, ValidMask, poisson_reconstruct
from .solver import OptimizationReport, SolverConfig, optimize
from .simulator import SimConfig, simulate_events, true_gradient_map
from .metrics import are_rmse, photometric_error

__all__ = [
    "CameraModel",
    "EventArray",
    "GradientMap",
    "OptimizationReport",
    "SimConfig",
    "SolverConfig",
    "Trajectory",
    "ValidMask",
    "are_rmse",
    "exp_so3",
    "log_so3",
    "optimize",
    "photometric_error",
    "poisson_reconstruct",
    "project_equirect",
    "read_events",
    "read_trajectory",
    "simulate_events",
    "true_gradient_map",
    "unproject_equirect",
    "write_events",
    "write_trajectory",
]
