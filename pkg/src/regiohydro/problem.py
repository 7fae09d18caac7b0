"""A calibration problem: everything needed to evaluate J and its gradient
for any control kind."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adjoint import cost, gauge_discharge, gradient_theta
from .errors import DimensionMismatch
from .mapping import (
    DistributedControl,
    MlpControl,
    RegressionControl,
    UniformControl,
    apply_control,
    mlp_backprop,
    multilinear_vjp,
)
from .model import Bounds, ParameterFields, StateFields
from .objective import CostConfig, j_total


@dataclass
class CalibrationSetup:
    plan: object
    forcing: object
    gauges: object
    descriptors: object = None
    bounds: Bounds = None
    cost_config: CostConfig = None
    init_states: StateFields = None

    def __post_init__(self):
        if self.bounds is None:
            self.bounds = Bounds.default()
        if self.cost_config is None:
            self.cost_config = CostConfig()
        n = self.plan.n_active
        if self.forcing.precip.shape[1] != n:
            raise DimensionMismatch("forcing does not cover the active cells")
        if self.descriptors is not None and self.descriptors.n_cells != n:
            raise DimensionMismatch("descriptors do not cover the active cells")

    @property
    def n_cells(self):
        return self.plan.n_active

    def with_gauges(self, gauges):
        return replace(self, gauges=gauges)

    # -- parameter-space evaluations --------------------------------------
    def parameters(self, ctrl):
        return apply_control(ctrl, self.descriptors, self.n_cells)

    def discharge(self, params):
        """(n_gauges, n_t) simulated discharge at the gauges."""
        return gauge_discharge(self.plan, self.forcing, params, self.gauges,
                               self.init_states)[0].T

    def cost_params(self, params):
        return cost(self.plan, self.forcing, params, self.gauges, self.cost_config,
                    self.init_states)

    def grad_params(self, params):
        j, g = gradient_theta(self.plan, self.forcing, params, self.gauges,
                              self.cost_config, self.init_states)
        return j, g.values

    # -- control-space evaluations ----------------------------------------
    def cost_uniform(self, theta):
        return self.cost_params(ParameterFields.uniform(theta, self.n_cells, self.bounds))

    def cost_control(self, ctrl, background=None):
        j = self.cost_params(self.parameters(ctrl))
        if background is None:
            return j
        return j_total(ctrl.to_vector(), background.to_vector(), j, self.cost_config)

    def cost_and_grad_control(self, ctrl, background=None):
        """J and dJ/d(control vector) through the mapping's chain rule."""
        params = self.parameters(ctrl)
        j, g = self.grad_params(params)
        if isinstance(ctrl, RegressionControl):
            grad = multilinear_vjp(self.descriptors, ctrl, g)
        elif isinstance(ctrl, MlpControl):
            grad = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in
                                   mlp_backprop(self.descriptors, ctrl, g)])
        elif isinstance(ctrl, DistributedControl):
            grad = g.ravel()
        elif isinstance(ctrl, UniformControl):
            grad = g.sum(axis=1)
        else:
            raise TypeError(f"unsupported control {type(ctrl).__name__}")
        if background is not None:
            j, reg_grad = j_total(ctrl.to_vector(), background.to_vector(), j,
                                  self.cost_config, with_grad=True)
            grad = grad + reg_grad
        return j, grad
