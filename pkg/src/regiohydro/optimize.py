"""Optimizers and the per-method calibration dispatcher.

* ``sbs_minimize``: bounded cyclic coordinate search with step halving, for
  the four-dimensional uniform controls.
* ``lbfgsb_minimize``: L-BFGS-B (scipy's implementation) for distributed
  and regression controls.
* ``train_annr``: Adam on the MLP weights, driven by adjoint gradients that
  are back-propagated through the network layer by layer.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import bayes
from .errors import HydroError, NonFiniteCost, PriorOnBound
from .mapping import (
    DistributedControl,
    MlpControl,
    UniformControl,
    apply_mlp,
    background_from_prior,
    mlp_backprop,
)
from .model import ParameterFields

log = logging.getLogger(__name__)

MAX_ITER = "MAX_ITER"
COST_TOL = "COST_TOL"
GRAD_TOL = "GRAD_TOL"
LINE_SEARCH_FAILURE = "LINE_SEARCH_FAILURE"
NON_FINITE = "NON_FINITE_COST"

UNIFORM_LOCAL = "uniform_local"
DISTRIBUTED_LOCAL = "distributed_local"
UR = "ur"
M2R = "m2r"
BGM2R = "bgm2r"
ANNR = "annr"
METHODS = (UNIFORM_LOCAL, DISTRIBUTED_LOCAL, UR, M2R, BGM2R, ANNR)
LOCAL_METHODS = (UNIFORM_LOCAL, DISTRIBUTED_LOCAL)

# keeps a first guess that sits on a bound invertible by the sigmoid
PRIOR_MARGIN = 1e-9


@dataclass(frozen=True)
class OptimizerConfig:
    max_iter: int = 100
    cost_rel_tol: float = 1e-6
    grad_tol: float = 1e-6
    lbfgs_memory: int = 10
    sbs_max_iter: int = 100
    sbs_min_step: float = 1e-3
    adam_max_iter: int = 500
    adam_lr: float = 0.003
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mlp_hidden: tuple = (32, 32)
    seed: int = 0

    def __post_init__(self):
        if min(self.cost_rel_tol, self.grad_tol, self.sbs_min_step, self.adam_eps) <= 0:
            raise ValueError("tolerances must be positive")
        if self.lbfgs_memory < 1:
            raise ValueError("L-BFGS memory must be >= 1")
        if min(self.max_iter, self.sbs_max_iter, self.adam_max_iter) < 0:
            raise ValueError("iteration limits must be non-negative")


@dataclass
class OptimizeReport:
    iterations: int = 0
    j_history: list = field(default_factory=list)
    grad_inf_norm: float | None = None
    stop_reason: str = MAX_ITER
    wall_time: float = 0.0
    n_evaluations: int = 0
    best_j: float | None = None
    line_search_failed: bool = False
    message: str = ""
    grad_history: list = field(default_factory=list)

    def to_csv(self):
        lines = ["iter,J,grad_inf_norm"]
        for i, j in enumerate(self.j_history):
            g = self.grad_history[i] if i < len(self.grad_history) else None
            lines.append(f"{i},{float(j)!r},{'' if g is None else repr(float(g))}")
        return "\n".join(lines) + "\n"


def sbs_minimize(func, bounds, cfg=None, x0=None):
    """Bounded cyclic coordinate search on a uniform control.

    Every cycle probes ``x_k ± step_k`` for each coordinate (clamped to the
    bounds) and keeps any improvement. The step starts at a quarter of each
    bound width and halves after a cycle without improvement; the search
    stops after ``sbs_max_iter`` cycles or once the step drops below
    ``sbs_min_step`` times the width.
    """
    cfg = cfg or OptimizerConfig()
    start = time.perf_counter()
    lo, hi, width = bounds.lower, bounds.upper, bounds.width
    x = 0.5 * (lo + hi) if x0 is None else np.clip(np.asarray(x0, dtype=np.float64), lo, hi)
    fx = float(func(x))
    report = OptimizeReport(j_history=[fx], n_evaluations=1)
    scale = 0.25
    cycles = 0
    while True:
        if scale < cfg.sbs_min_step:
            report.stop_reason = COST_TOL
            break
        if cycles >= cfg.sbs_max_iter:
            report.stop_reason = MAX_ITER
            break
        cycles += 1
        improved = False
        for k in range(x.size):
            for sign in (1.0, -1.0):
                trial = x.copy()
                trial[k] = min(max(x[k] + sign * scale * width[k], lo[k]), hi[k])
                if trial[k] == x[k]:
                    continue
                ft = float(func(trial))
                report.n_evaluations += 1
                if not np.isfinite(ft):
                    continue
                if ft < fx:
                    x, fx = trial, ft
                    improved = True
                    break
        report.j_history.append(fx)
        if not improved:
            scale *= 0.5
    report.iterations = cycles
    report.best_j = fx
    report.wall_time = time.perf_counter() - start
    return x, report


_SCIPY_STOPS = {
    "NORM OF PROJECTED GRADIENT": GRAD_TOL,
    "RELATIVE REDUCTION OF F": COST_TOL,
    "REL_REDUCTION_OF_F": COST_TOL,
}


def lbfgsb_minimize(func_and_grad, rho0, bounds=None, cfg=None):
    """L-BFGS-B on ``func_and_grad(x) -> (J, grad)``.

    ``bounds`` is an optional ``(lower, upper)`` pair of arrays; regression
    and MLP controls run unbounded. Stops on the projected-gradient
    infinity norm (``grad_tol``), on ``(J_prev - J) / max(|J|, 1)``
    (``cost_rel_tol``) or on ``max_iter``.
    """
    cfg = cfg or OptimizerConfig()
    start = time.perf_counter()
    report = OptimizeReport()
    cache = {}
    best = {"j": np.inf, "x": np.array(rho0, dtype=np.float64)}

    def wrapped(x):
        j, g = func_and_grad(x)
        j = float(j)
        g = np.asarray(g, dtype=np.float64)
        report.n_evaluations += 1
        if not (np.isfinite(j) and np.all(np.isfinite(g))):
            raise NonFiniteCost(f"non-finite cost or gradient at evaluation {report.n_evaluations}")
        cache["x"], cache["g"] = x.copy(), g
        if j < best["j"]:
            best["j"], best["x"], best["g"] = j, x.copy(), g
        return j, g

    def projected_inf_norm(x, g):
        if bounds is None:
            return float(np.max(np.abs(g))) if g.size else 0.0
        lo, hi = bounds
        pg = np.clip(x - g, lo, hi) - x
        return float(np.max(np.abs(pg))) if pg.size else 0.0

    x0 = np.array(rho0, dtype=np.float64)
    j0, g0 = wrapped(x0)
    report.j_history.append(j0)
    report.grad_inf_norm = projected_inf_norm(x0, g0)
    report.grad_history.append(report.grad_inf_norm)
    if cfg.max_iter == 0 or report.grad_inf_norm <= cfg.grad_tol:
        report.stop_reason = MAX_ITER if report.grad_inf_norm > cfg.grad_tol else GRAD_TOL
        report.best_j = j0
        report.wall_time = time.perf_counter() - start
        return x0, report

    def callback(intermediate_result):
        report.j_history.append(float(intermediate_result.fun))
        report.grad_history.append(projected_inf_norm(cache["x"], cache["g"]))

    scipy_bounds = None if bounds is None else list(zip(bounds[0], bounds[1]))
    try:
        res = minimize(
            wrapped, x0, jac=True, method="L-BFGS-B", bounds=scipy_bounds,
            callback=callback,
            options={"maxiter": cfg.max_iter, "maxcor": cfg.lbfgs_memory,
                     "ftol": cfg.cost_rel_tol, "gtol": cfg.grad_tol,
                     "maxfun": max(15000, 20 * cfg.max_iter), "maxls": 40},
        )
    except NonFiniteCost as exc:
        log.warning("L-BFGS-B aborted: %s; returning best iterate", exc)
        report.stop_reason = NON_FINITE
        report.message = str(exc)
        report.best_j = best["j"]
        report.wall_time = time.perf_counter() - start
        return best["x"], report
    message = res.message if isinstance(res.message, str) else res.message.decode()
    report.message = message
    report.iterations = int(res.nit)
    if res.status == 0:
        report.stop_reason = next((v for k, v in _SCIPY_STOPS.items() if k in message), GRAD_TOL)
    elif res.status == 1:
        report.stop_reason = MAX_ITER
    else:
        report.stop_reason = LINE_SEARCH_FAILURE
        report.line_search_failed = True
    x = best["x"]
    report.best_j = best["j"]
    report.grad_inf_norm = projected_inf_norm(x, best["g"])
    report.wall_time = time.perf_counter() - start
    return x, report


class Adam:
    """Adam with one moment pair per parameter block (one block per layer)."""

    def __init__(self, cfg):
        self.lr = cfg.adam_lr
        self.b1 = cfg.adam_beta1
        self.b2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.state = {}

    def step(self, key, param, grad):
        m, v, t = self.state.get(key, (np.zeros_like(param), np.zeros_like(param), 0))
        t += 1
        m = self.b1 * m + (1.0 - self.b1) * grad
        v = self.b2 * v + (1.0 - self.b2) * grad * grad
        self.state[key] = (m, v, t)
        m_hat = m / (1.0 - self.b1 ** t)
        v_hat = v / (1.0 - self.b2 ** t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_annr(setup, mlp, cfg=None):
    """Train the MLP mapping for ``adam_max_iter`` iterations.

    Each iteration maps descriptors to parameters, runs the forward model
    and its adjoint for J and dJ/dθ, then back-propagates through the
    network from the output layer down, updating every layer with Adam
    as soon as its gradient is available. Returns the control with the
    lowest J seen (including the final one) and the report.
    """
    cfg = cfg or OptimizerConfig()
    start = time.perf_counter()
    ctrl = mlp.copy()
    adam = Adam(cfg)
    report = OptimizeReport()
    best_j, best_ctrl = np.inf, ctrl.copy()

    def update(j, d_w, d_b):
        ctrl.weights[j] = adam.step(("W", j), ctrl.weights[j], d_w)
        ctrl.biases[j] = adam.step(("b", j), ctrl.biases[j], d_b)

    for it in range(cfg.adam_max_iter + 1):
        params = apply_mlp(setup.descriptors, ctrl)
        if it == cfg.adam_max_iter:
            j = setup.cost_params(params)
        else:
            j, g = setup.grad_params(params)
        report.n_evaluations += 1
        if not np.isfinite(j):
            report.stop_reason = NON_FINITE
            report.message = f"non-finite cost at iteration {it}"
            break
        report.j_history.append(float(j))
        if j < best_j:
            best_j, best_ctrl = j, ctrl.copy()
        if it == cfg.adam_max_iter:
            break
        grads = mlp_backprop(setup.descriptors, ctrl, g, update=update)
        report.grad_inf_norm = max(float(np.max(np.abs(a))) for pair in grads for a in pair)
        report.grad_history.append(report.grad_inf_norm)
        report.iterations = it + 1
    report.best_j = float(best_j)
    report.wall_time = time.perf_counter() - start
    return best_ctrl, report


# -- calibration dispatcher ---------------------------------------------------

@dataclass
class CalibrationResult:
    method: str
    control: object
    params: object
    report: OptimizeReport
    cost: float
    first_guess: np.ndarray | None = None
    per_gauge: dict = field(default_factory=dict)   # local methods: gauge_id -> result
    ldb: object = None


def _uniform_calibration(setup, cfg, x0=None):
    theta, report = sbs_minimize(setup.cost_uniform, setup.bounds, cfg, x0)
    ctrl = UniformControl(theta, setup.bounds)
    return ctrl, report


def safe_prior(theta, bounds):
    """Nudge a first guess sitting on a bound just inside it."""
    margin = PRIOR_MARGIN * bounds.width
    return np.clip(theta, bounds.lower + margin, bounds.upper - margin)


def regression_calibration(setup, prior, cfg):
    try:
        background = background_from_prior(prior, setup.descriptors.n_desc, setup.bounds)
    except PriorOnBound:
        background = background_from_prior(safe_prior(prior, setup.bounds),
                                           setup.descriptors.n_desc, setup.bounds)

    def fg(vec):
        return setup.cost_and_grad_control(background.with_vector(vec))

    vec, report = lbfgsb_minimize(fg, background.to_vector(), None, cfg)
    return background.with_vector(vec), report


def distributed_calibration(setup, start_values, cfg, cells=None):
    """L-BFGS-B on θ(x) over ``cells`` in bound-normalised coordinates."""
    bounds = setup.bounds
    lo, width = bounds.lower[:, None], bounds.width[:, None]
    base = np.array(start_values, dtype=np.float64)
    if cells is None:
        cells = np.arange(setup.n_cells)
    shape = (base.shape[0], cells.size)

    def unpack(z):
        values = base.copy()
        values[:, cells] = np.clip(lo + width * z.reshape(shape), lo, lo + width)
        return values

    def fg(z):
        values = unpack(z)
        j, g = setup.grad_params(DistributedControl(values, bounds).parameters())
        return j, (g[:, cells] * width).ravel()

    z0 = ((base[:, cells] - lo) / width).ravel()
    zb = (np.zeros(z0.size), np.ones(z0.size))
    z, report = lbfgsb_minimize(fg, np.clip(z0, 0.0, 1.0), zb, cfg)
    return DistributedControl(unpack(z), bounds), report


def calibrate(method, setup, cfg=None, bayes_size=512, bayes_seed=0, threads=1,
              warm_start=None):
    """Calibrate ``setup`` with one of :data:`METHODS`.

    ``warm_start`` optionally overrides the starting point: a uniform θ̄ for
    UR / M2R / BGM2R / uniform_local, parameter maps (4, n) for
    distributed_local, an ``MlpControl`` for ANNR.
    """
    cfg = cfg or OptimizerConfig()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method in LOCAL_METHODS:
        return _calibrate_local(method, setup, cfg, warm_start)
    if method == UR:
        ctrl, report = _uniform_calibration(setup, cfg, warm_start)
        params = setup.parameters(ctrl)
        return CalibrationResult(method, ctrl, params, report, report.best_j)
    if method in (M2R, BGM2R):
        ldb = None
        if warm_start is not None:
            prior = np.asarray(warm_start, dtype=np.float64)
        elif method == M2R:
            prior, _ = _uniform_calibration(setup, cfg)
            prior = prior.theta
        else:
            ldb = bayes.ldb_first_guess(setup, bayes_size, bayes_seed, threads)
            prior = ldb.prior
        ctrl, report = regression_calibration(setup, prior, cfg)
        params = setup.parameters(ctrl)
        return CalibrationResult(method, ctrl, params, report, report.best_j,
                                 first_guess=prior, ldb=ldb)
    mlp = warm_start
    if mlp is None:
        mlp = MlpControl.initialize(setup.descriptors.n_desc, cfg.mlp_hidden, cfg.seed,
                                    setup.bounds)
    ctrl, report = train_annr(setup, mlp, cfg)
    params = setup.parameters(ctrl)
    return CalibrationResult(method, ctrl, params, report, report.best_j)


def _calibrate_local(method, setup, cfg, warm_start):
    """One single-gauge calibration per gauge.

    The reported cost is the gauge-weighted sum of each run's own J; the
    mosaic parameter map takes each gauge's values over its catchment,
    inner (upstream) gauges overriding outer ones.
    """
    plan, gauges = setup.plan, setup.gauges
    per_gauge = {}
    total = 0.0
    weights = gauges.weights
    for g, gauge in enumerate(gauges.gauges):
        single = gauges.select(plan, [gauge.gauge_id])
        sub = setup.with_gauges(single)
        try:
            if method == UNIFORM_LOCAL:
                x0 = None if warm_start is None else warm_start
                ctrl, report = _uniform_calibration(sub, cfg, x0)
            else:
                if warm_start is not None:
                    start = np.asarray(warm_start, dtype=np.float64)
                else:
                    uniform, _ = _uniform_calibration(sub, cfg)
                    start = uniform.parameters(setup.n_cells).values
                cells = np.flatnonzero(single.upstream_masks[0])
                ctrl, report = distributed_calibration(sub, start, cfg, cells)
        except HydroError as exc:
            raise HydroError(f"local calibration of gauge {gauge.gauge_id} failed: {exc}") from exc
        params = sub.parameters(ctrl)
        per_gauge[gauge.gauge_id] = CalibrationResult(method, ctrl, params, report, report.best_j)
        total += weights[g] * report.best_j
    mosaic = _mosaic(setup, per_gauge)
    report = OptimizeReport(iterations=sum(r.report.iterations for r in per_gauge.values()),
                            j_history=[total], stop_reason=MAX_ITER, best_j=total,
                            wall_time=sum(r.report.wall_time for r in per_gauge.values()))
    return CalibrationResult(method, None, mosaic, report, total, per_gauge=per_gauge)


def _mosaic(setup, per_gauge):
    gauges = setup.gauges
    # outer catchments first so nested (smaller) ones overwrite them
    sizes = gauges.upstream_masks.sum(axis=1)
    values = None
    for g in np.argsort(-sizes, kind="stable"):
        res = per_gauge[gauges.gauges[g].gauge_id]
        if values is None:
            values = res.params.values.copy()
        mask = gauges.upstream_masks[g]
        values[:, mask] = res.params.values[:, mask]
    return ParameterFields(values, setup.bounds)
