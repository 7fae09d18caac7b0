"""Differentiable distributed rainfall-runoff calibration with regionalization
mappings from physical descriptors to model parameters."""
from .adjoint import check_gradient_fd, gradient_theta
from .grid import DescriptorStack, DrainagePlan, Gauge, GaugeSet
from .mapping import MlpControl, RegressionControl, UniformControl, apply_control
from .model import Bounds, ForcingSeries, ParameterFields, simulate
from .optimize import OptimizerConfig, calibrate
from .problem import CalibrationSetup
from .synthetic import DomainSpec, generate_synthetic

__version__ = "0.1.0"
