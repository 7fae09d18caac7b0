"""Descriptor-to-parameter mappings and the calibration control vectors.

Four control kinds are supported:

* ``UniformControl``: one value per parameter, spatially uniform.
* ``DistributedControl``: one value per parameter and active cell.
* ``RegressionControl``: bounded multilinear regression on descriptors,
  ``theta_k(x) = s_k(a_k0 + sum_d a_kd * D_d(x))``.
* ``MlpControl``: multilayer perceptron with a sigmoid scaler output layer.

Every mapping output goes through the sigmoid scaler
``s_k(y) = l_k + (u_k - l_k) / (1 + exp(-y))`` so parameters stay strictly
inside their bounds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, OutOfOpenInterval, PriorOnBound
from .model import N_PARAMS, Bounds, ParameterFields

CONTROL_FORMAT = "regiohydro-control"
CONTROL_VERSION = 1


@dataclass(frozen=True)
class SigmoidScaler:
    bounds: Bounds

    @property
    def _open_interval(self):
        lo = np.nextafter(self.bounds.lower, np.inf)
        hi = np.nextafter(self.bounds.upper, -np.inf)
        return lo, hi

    def scale(self, y):
        """Map raw values (4, ...) into the open box (l, u)."""
        y = np.asarray(y, dtype=np.float64)
        shape = (-1,) + (1,) * (y.ndim - 1)
        lo, hi = self._open_interval
        z = self.bounds.lower.reshape(shape) + self.bounds.width.reshape(shape) * expit(y)
        return np.clip(z, lo.reshape(shape), hi.reshape(shape))

    def derivative(self, y):
        y = np.asarray(y, dtype=np.float64)
        shape = (-1,) + (1,) * (y.ndim - 1)
        s = expit(y)
        return self.bounds.width.reshape(shape) * s * (1.0 - s)

    def inverse(self, z):
        z = np.asarray(z, dtype=np.float64)
        shape = (-1,) + (1,) * (z.ndim - 1)
        lo = self.bounds.lower.reshape(shape)
        hi = self.bounds.upper.reshape(shape)
        if np.any(z <= lo) or np.any(z >= hi):
            raise OutOfOpenInterval(f"values {z} outside the open bounds ({lo}, {hi})")
        return np.log((z - lo) / (hi - z))


def sigmoid_scale(y, k, bounds=None):
    """Bounded value of raw scalar ``y`` for parameter index ``k``."""
    bounds = bounds or Bounds.default()
    y_vec = np.zeros(N_PARAMS)
    y_vec[k] = y
    return float(SigmoidScaler(bounds).scale(y_vec)[k])


def inverse_sigmoid(z, k, bounds=None):
    """Raw preimage ln((z - l_k)/(u_k - z)) of a bounded scalar."""
    bounds = bounds or Bounds.default()
    lo, hi = bounds.lower[k], bounds.upper[k]
    if not lo < z < hi:
        raise OutOfOpenInterval(f"{z!r} is outside the open interval ({lo!r}, {hi!r})")
    return float(np.log((z - lo) / (hi - z)))


# -- controls -----------------------------------------------------------------

@dataclass
class UniformControl:
    theta: np.ndarray
    bounds: Bounds = field(default_factory=Bounds.default)
    kind = "uniform"

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64).reshape(N_PARAMS)

    def parameters(self, n_cells):
        return ParameterFields.uniform(self.theta, n_cells, self.bounds)

    def to_vector(self):
        return self.theta.copy()

    def with_vector(self, vec):
        return UniformControl(vec, self.bounds)


@dataclass
class DistributedControl:
    values: np.ndarray
    bounds: Bounds = field(default_factory=Bounds.default)
    kind = "distributed"

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != N_PARAMS:
            raise DimensionMismatch("distributed control must have shape (4, n_cells)")

    def parameters(self, n_cells=None):
        return ParameterFields(self.values.copy(), self.bounds)

    def to_vector(self):
        return self.values.ravel().copy()

    def with_vector(self, vec):
        return DistributedControl(np.reshape(vec, self.values.shape), self.bounds)


@dataclass
class RegressionControl:
    """Multilinear regression control: intercepts (4,) and slopes (4, N_D).

    Exponents are kept for the data model and frozen at 1.
    """

    intercepts: np.ndarray
    coefficients: np.ndarray
    bounds: Bounds = field(default_factory=Bounds.default)
    kind = "regression"

    def __post_init__(self):
        self.intercepts = np.array(self.intercepts, dtype=np.float64).reshape(N_PARAMS)
        self.coefficients = np.atleast_2d(np.array(self.coefficients, dtype=np.float64))
        if self.coefficients.shape[0] != N_PARAMS:
            raise DimensionMismatch("coefficients must have shape (4, n_desc)")
        if not (np.all(np.isfinite(self.intercepts)) and np.all(np.isfinite(self.coefficients))):
            raise ValueError("regression control must be finite")

    @property
    def n_desc(self):
        return self.coefficients.shape[1]

    @property
    def exponents(self):
        return np.ones_like(self.coefficients)

    def to_vector(self):
        return np.column_stack([self.intercepts, self.coefficients]).ravel()

    def with_vector(self, vec):
        m = np.reshape(vec, (N_PARAMS, self.n_desc + 1))
        return RegressionControl(m[:, 0], m[:, 1:], self.bounds)


def _check_desc(descriptors, n_desc):
    if descriptors.n_desc != n_desc:
        raise DimensionMismatch(
            f"control expects {n_desc} descriptors, got {descriptors.n_desc}"
        )


def apply_multilinear(descriptors, ctrl):
    """Parameter maps from a regression control."""
    _check_desc(descriptors, ctrl.n_desc)
    y = ctrl.intercepts[:, None] + ctrl.coefficients @ descriptors.values
    return ParameterFields(SigmoidScaler(ctrl.bounds).scale(y), ctrl.bounds)


def multilinear_vjp(descriptors, ctrl, grad_theta):
    """Pull dJ/dθ (4, n) back to the regression control vector."""
    _check_desc(descriptors, ctrl.n_desc)
    grad_theta = np.asarray(grad_theta, dtype=np.float64)
    if grad_theta.shape != (N_PARAMS, descriptors.n_cells):
        raise DimensionMismatch("gradient fields do not match the descriptor cells")
    y = ctrl.intercepts[:, None] + ctrl.coefficients @ descriptors.values
    gy = grad_theta * SigmoidScaler(ctrl.bounds).derivative(y)
    d_int = gy.sum(axis=1)
    d_coef = gy @ descriptors.values.T
    return np.column_stack([d_int, d_coef]).ravel()


def background_from_prior(prior, n_desc, bounds=None):
    """Regression control whose map is the uniform field ``prior``."""
    bounds = bounds or Bounds.default()
    prior = np.asarray(prior, dtype=np.float64).reshape(N_PARAMS)
    for k in range(N_PARAMS):
        if not bounds.lower[k] < prior[k] < bounds.upper[k]:
            raise PriorOnBound(k, float(prior[k]))
    intercepts = SigmoidScaler(bounds).inverse(prior)
    return RegressionControl(intercepts, np.zeros((N_PARAMS, n_desc)), bounds)


# -- multilayer perceptron ----------------------------------------------------

@dataclass
class MlpControl:
    """MLP weights ``W_j`` (n_out, n_in) and biases ``b_j`` (n_out,)."""

    weights: list
    biases: list
    bounds: Bounds = field(default_factory=Bounds.default)
    activation: str = "tanh"
    kind = "mlp"

    def __post_init__(self):
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatch("need one bias vector per weight matrix")
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionMismatch(f"layer {j}: weight {w.shape} / bias {b.shape}")
            if j and w.shape[1] != self.weights[j - 1].shape[0]:
                raise DimensionMismatch(f"layer {j} input does not match layer {j - 1} output")
        if self.weights[-1].shape[0] != N_PARAMS:
            raise DimensionMismatch("the output layer must emit one value per parameter")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def initialize(cls, n_desc, hidden=(32, 32), seed=0, bounds=None, activation="tanh"):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        sizes = [n_desc, *hidden, N_PARAMS]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, bounds or Bounds.default(), activation)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_layers(self):
        return len(self.weights)

    def to_vector(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_vector(self, vec):
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(np.reshape(vec[pos:pos + w.size], w.shape))
            pos += w.size
            biases.append(np.array(vec[pos:pos + b.size]))
            pos += b.size
        return MlpControl(weights, biases, self.bounds, self.activation)

    def copy(self):
        return self.with_vector(self.to_vector())


def _tanh_grad(a):
    return 1.0 - a * a


def _identity(z):
    return z


def _identity_grad(a):
    return np.ones_like(a)


_ACTIVATIONS = {"tanh": (np.tanh, _tanh_grad), "linear": (_identity, _identity_grad)}


def mlp_forward(descriptors, ctrl):
    """Return (theta (4, n), hidden activations, output pre-activation)."""
    _check_desc(descriptors, ctrl.layer_sizes[0])
    act, _ = _ACTIVATIONS[ctrl.activation]
    a = descriptors.values
    acts = [a]
    for j in range(ctrl.n_layers - 1):
        a = act(ctrl.weights[j] @ a + ctrl.biases[j][:, None])
        acts.append(a)
    y = ctrl.weights[-1] @ a + ctrl.biases[-1][:, None]
    return SigmoidScaler(ctrl.bounds).scale(y), acts, y


def apply_mlp(descriptors, ctrl):
    """Parameter maps from an MLP control (cell-wise forward pass)."""
    theta, _, _ = mlp_forward(descriptors, ctrl)
    return ParameterFields(theta, ctrl.bounds)


def mlp_backprop(descriptors, ctrl, grad_theta, update=None):
    """Back-propagate dJ/dθ through the network, output layer first.

    Returns a list of ``(dW_j, db_j)`` in layer order. If ``update`` is
    given it is called as ``update(j, dW_j, db_j)`` right after layer ``j``'s
    gradient and the propagated accumulator are computed, so an optimizer can
    update that layer before the next (shallower) one is processed.
    """
    grad_theta = np.asarray(grad_theta, dtype=np.float64)
    if grad_theta.shape != (N_PARAMS, descriptors.n_cells):
        raise DimensionMismatch("gradient fields do not match the descriptor cells")
    _, dact = _ACTIVATIONS[ctrl.activation]
    _, acts, y = mlp_forward(descriptors, ctrl)
    delta = grad_theta * SigmoidScaler(ctrl.bounds).derivative(y)
    grads = [None] * ctrl.n_layers
    for j in range(ctrl.n_layers - 1, -1, -1):
        a_prev = acts[j]
        d_w = delta @ a_prev.T
        d_b = delta.sum(axis=1)
        grads[j] = (d_w, d_b)
        accumulated = ctrl.weights[j].T @ delta
        if j > 0:
            delta = accumulated * dact(a_prev)
        if update is not None:
            update(j, d_w, d_b)
    return grads


def apply_control(ctrl, descriptors=None, n_cells=None):
    """Parameter maps for any control kind."""
    if isinstance(ctrl, RegressionControl):
        return apply_multilinear(descriptors, ctrl)
    if isinstance(ctrl, MlpControl):
        return apply_mlp(descriptors, ctrl)
    if isinstance(ctrl, UniformControl):
        return ctrl.parameters(n_cells if n_cells is not None else descriptors.n_cells)
    return ctrl.parameters()


# -- serialization ------------------------------------------------------------

def _bounds_dict(bounds):
    return {"lower": bounds.lower.tolist(), "upper": bounds.upper.tolist()}


def control_to_dict(ctrl):
    data = {"format": CONTROL_FORMAT, "version": CONTROL_VERSION, "kind": ctrl.kind,
            "bounds": _bounds_dict(ctrl.bounds)}
    if isinstance(ctrl, UniformControl):
        data["theta"] = ctrl.theta.tolist()
    elif isinstance(ctrl, DistributedControl):
        data["dims"] = {"n_cells": ctrl.values.shape[1]}
        data["values"] = ctrl.values.tolist()
    elif isinstance(ctrl, RegressionControl):
        data["dims"] = {"n_params": N_PARAMS, "n_desc": ctrl.n_desc}
        data["intercepts"] = ctrl.intercepts.tolist()
        data["coefficients"] = ctrl.coefficients.tolist()
        data["exponents"] = ctrl.exponents.tolist()
    elif isinstance(ctrl, MlpControl):
        data["dims"] = {"layer_sizes": ctrl.layer_sizes}
        data["activation"] = ctrl.activation
        data["layers"] = [{"weights": w.tolist(), "bias": b.tolist()}
                          for w, b in zip(ctrl.weights, ctrl.biases)]
    else:
        raise TypeError(f"cannot serialize {type(ctrl).__name__}")
    return data


def control_from_dict(data):
    if data.get("format") != CONTROL_FORMAT:
        raise ValueError("not a serialized control")
    if data.get("version") != CONTROL_VERSION:
        raise ValueError(f"unsupported control version {data.get('version')!r}")
    bounds = Bounds(data["bounds"]["lower"], data["bounds"]["upper"])
    kind = data["kind"]
    if kind == "uniform":
        return UniformControl(data["theta"], bounds)
    if kind == "distributed":
        return DistributedControl(data["values"], bounds)
    if kind == "regression":
        if np.any(np.asarray(data.get("exponents", 1.0)) != 1.0):
            raise ValueError("regression exponents other than 1 are not supported")
        return RegressionControl(data["intercepts"], data["coefficients"], bounds)
    if kind == "mlp":
        layers = data["layers"]
        ctrl = MlpControl([l["weights"] for l in layers], [l["bias"] for l in layers],
                          bounds, data["activation"])
        if ctrl.layer_sizes != data["dims"]["layer_sizes"]:
            raise DimensionMismatch("layer sizes do not match the declared dims")
        return ctrl
    raise ValueError(f"unknown control kind {kind!r}")


def dumps_control(ctrl):
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(control_to_dict(ctrl), indent=1)


def loads_control(text):
    return control_from_dict(json.loads(text))
