import numpy as np
import pytest
from scipy.optimize import rosen, rosen_der

from regiohydro.model import Bounds
from regiohydro.optimize import (
    COST_TOL,
    GRAD_TOL,
    MAX_ITER,
    NON_FINITE,
    Adam,
    OptimizerConfig,
    lbfgsb_minimize,
    safe_prior,
    sbs_minimize,
)


def spd_quadratic(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, n))
    a = m @ m.T + n * np.eye(n)
    b = rng.normal(size=n)
    return a, b


def test_lbfgsb_solves_quadratic():
    a, b = spd_quadratic(10, 0)

    def fg(x):
        return 0.5 * x @ a @ x - b @ x, a @ x - b

    x, rep = lbfgsb_minimize(fg, np.zeros(10), None, OptimizerConfig(grad_tol=1e-10,
                                                                    cost_rel_tol=1e-15))
    assert np.max(np.abs(x - np.linalg.solve(a, b))) < 1e-8
    assert rep.stop_reason in (GRAD_TOL, COST_TOL)
    assert rep.iterations <= 20


def test_lbfgsb_rosenbrock():
    x, rep = lbfgsb_minimize(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0]), None,
                             OptimizerConfig(max_iter=200, grad_tol=1e-9, cost_rel_tol=1e-15))
    assert np.allclose(x, [1.0, 1.0], atol=1e-5)


def test_lbfgsb_history_is_monotone():
    a, b = spd_quadratic(6, 3)
    _, rep = lbfgsb_minimize(lambda x: (0.5 * x @ a @ x - b @ x, a @ x - b), np.ones(6))
    hist = np.array(rep.j_history)
    assert np.all(np.diff(hist) <= 1e-12)
    assert rep.to_csv().splitlines()[0] == "iter,J,grad_inf_norm"


def test_lbfgsb_start_at_optimum():
    _, rep = lbfgsb_minimize(lambda x: (float(x @ x), 2 * x), np.zeros(3))
    assert rep.stop_reason == GRAD_TOL and rep.iterations <= 1


def test_lbfgsb_respects_bounds():
    lo, hi = np.zeros(2), np.ones(2)
    x, _ = lbfgsb_minimize(lambda x: (float(np.sum((x - 3) ** 2)), 2 * (x - 3)),
                           np.full(2, 0.5), (lo, hi))
    assert np.allclose(x, 1.0)


def test_lbfgsb_non_finite_stops():
    def fg(x):
        return (np.nan, np.zeros_like(x)) if x[0] > 0.5 else (float(-x[0]), -np.ones_like(x))

    x, rep = lbfgsb_minimize(fg, np.zeros(1))
    assert rep.stop_reason == NON_FINITE
    assert np.isfinite(rep.best_j)


def test_sbs_finds_interior_optimum():
    b = Bounds([1, 1, -50, 1], [2000, 1000, 50, 1000])
    target = np.array([712.0, 333.0, -7.5, 41.0])
    x, rep = sbs_minimize(lambda x: float(np.sum(((x - target) / b.width) ** 2)), b)
    assert np.all(np.abs(x - target) <= 1e-2 * b.width)
    assert rep.stop_reason in (COST_TOL, MAX_ITER)
    assert np.all(np.diff(rep.j_history) <= 0)


def test_sbs_iteration_cap():
    b = Bounds.default()
    _, rep = sbs_minimize(lambda x: float(np.sum(x ** 2)), b, OptimizerConfig(sbs_max_iter=2))
    assert rep.stop_reason == MAX_ITER and rep.iterations == 2


def test_adam_converges_on_bowl():
    cfg = OptimizerConfig(adam_lr=0.05)
    opt = Adam(cfg)
    x = np.array([3.0, -2.0])
    for _ in range(2000):
        x = opt.step("x", x, 2 * x)
    assert np.allclose(x, 0.0, atol=1e-3)


def test_adam_first_step_has_learning_rate_size():
    opt = Adam(OptimizerConfig(adam_lr=0.01))
    x = opt.step("w", np.array([1.0, 1.0]), np.array([5.0, -0.2]))
    assert np.allclose(x, [0.99, 1.01], rtol=1e-6)


def test_safe_prior_moves_bound_values_inside():
    b = Bounds.default()
    p = safe_prior(np.array([2000.0, 470.88, 3.04, 55.12]), b)
    assert np.all(p < b.upper) and np.all(p > b.lower)
    assert p[1:].tolist() == [470.88, 3.04, 55.12]


def test_config_rejects_bad_tolerances():
    with pytest.raises(ValueError):
        OptimizerConfig(grad_tol=0.0)
    assert OptimizerConfig().max_iter == 100
    assert OptimizerConfig().adam_max_iter == 500
    assert MAX_ITER == "MAX_ITER"
