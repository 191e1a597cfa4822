"""Adjoint-method conditioning gradients for flow and diffusion samplers."""

from .adjoint import adjoint_solve, batch_sensitivity, discrete_adjoint, sensitivity
from .core import Conditioning, SensitivityResult, StateVector, TimeGrid, edm_time_grid, gaussian_noise
from .quantities import QuantitySpec, evaluate, gradient
from .sampler import Trajectory, sample

__version__ = "0.1.0"

__all__ = [
    "Conditioning",
    "QuantitySpec",
    "SensitivityResult",
    "StateVector",
    "TimeGrid",
    "Trajectory",
    "adjoint_solve",
    "batch_sensitivity",
    "discrete_adjoint",
    "edm_time_grid",
    "evaluate",
    "gaussian_noise",
    "gradient",
    "sample",
    "sensitivity",
]
