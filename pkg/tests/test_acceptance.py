"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that is printed in the terminal summary."""
import math
import time

import numpy as np
import pytest

from regiohydro.adjoint import check_gradient_fd
from regiohydro.bayes import (
    DEFAULT_ALPHAS,
    EnsembleSample,
    likelihood,
    posterior_mean_var,
    select_corner,
)
from regiohydro.cli import main
from regiohydro.grid import DescriptorStack, DrainagePlan
from regiohydro.mapping import MlpControl, RegressionControl, apply_control
from regiohydro.model import Bounds, ForcingSeries, ParameterFields, simulate
from regiohydro.objective import nse
from regiohydro.optimize import (
    ANNR,
    BGM2R,
    DISTRIBUTED_LOCAL,
    M2R,
    UR,
    OptimizerConfig,
    calibrate,
    lbfgsb_minimize,
    sbs_minimize,
)
from regiohydro.problem import CalibrationSetup
from regiohydro.synthetic import DomainSpec, generate_synthetic, random_drainage

from conftest import make_desk_case

RESULTS = []


def record(number, title, ok, detail):
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
    assert ok, detail


# -- 1, 2: gradients on the desk case -----------------------------------------

def test_01_adjoint_matches_finite_differences():
    desk = make_desk_case(0)
    start = time.perf_counter()
    report = check_gradient_fd(desk.plan, desk.forcing, desk.params, desk.gauges, 10, seed=0)
    elapsed = time.perf_counter() - start
    ok = len(report.rows) == 40 and report.max_rel_error < 1e-5 and elapsed < 10.0
    record(1, "adjoint vs central FD (5x5, 24 steps, 2 gauges, 40 probes)", ok,
           f"max rel err {report.max_rel_error:.2e} (< 1e-5), {len(report.rows)} probes, "
           f"{len(report.rejected)} rejected, {elapsed:.2f} s (< 10 s)")


def test_02_annr_weight_gradient():
    desk = make_desk_case(0)
    setup = desk.setup()
    mlp = MlpControl.initialize(desk.descriptors.n_desc, (32, 32), seed=0, bounds=desk.bounds)
    _, grad = setup.cost_and_grad_control(mlp)
    vec = mlp.to_vector()
    weight_idx, pos = [], 0
    for w, b in zip(mlp.weights, mlp.biases):
        weight_idx.extend(range(pos, pos + w.size))
        pos += w.size + b.size
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in rng.choice(weight_idx, 20, replace=False):
        h = 1e-5
        up, dn = vec.copy(), vec.copy()
        up[i] += h
        dn[i] -= h
        fd = (setup.cost_control(mlp.with_vector(up))
              - setup.cost_control(mlp.with_vector(dn))) / (2 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(fd), 1e-12))
    record(2, "ANNR dJ/dW for 20 random weights vs FD", worst < 1e-5,
           f"max rel err {worst:.2e} (< 1e-5)")


# -- 3, 4, 7: twin experiment --------------------------------------------------

@pytest.fixture(scope="module")
def twin():
    ds = generate_synthetic(DomainSpec(nrows=20, ncols=20, n_gauges=8, n_donors=5,
                                       n_steps=2880), seed=0)
    t0, t1 = ds.periods["P1"]
    donors = CalibrationSetup(ds.plan, ds.forcing.window(t0, t1),
                              ds.gauges.select(ds.plan, ds.donors, t0, t1),
                              ds.descriptors, ds.bounds)
    ungauged = donors.with_gauges(ds.gauges.select(ds.plan, ds.ungauged, t0, t1))
    return {"ds": ds, "cal": donors, "spatial": ungauged, "runs": {}, "time": {}}


def _median_nse(setup, params):
    q = setup.discharge(params)
    w = setup.cost_config.warmup(q.shape[1])
    return float(np.median([nse(q[k, w:], g.observed[w:])
                            for k, g in enumerate(setup.gauges.gauges)]))


def _run(twin, method, **kwargs):
    if method not in twin["runs"]:
        start = time.perf_counter()
        twin["runs"][method] = calibrate(method, twin["cal"], OptimizerConfig(), **kwargs)
        twin["time"][method] = time.perf_counter() - start
    return twin["runs"][method]


def test_03_twin_recovery(twin):
    cal, spatial = twin["cal"], twin["spatial"]
    ur = _run(twin, UR)
    # M2R's own first guess is the UR optimum; reuse it
    m2r = _run(twin, M2R, warm_start=ur.control.theta)
    bg = _run(twin, BGM2R)
    annr = _run(twin, ANNR)
    scores = {
        "m2r": (_median_nse(cal, m2r.params), _median_nse(spatial, m2r.params)),
        "bgm2r": (_median_nse(cal, bg.params), _median_nse(spatial, bg.params)),
        "annr": (_median_nse(cal, annr.params), _median_nse(spatial, annr.params)),
    }
    total = sum(twin["time"][m] for m in (UR, M2R, BGM2R, ANNR))
    ok = (scores["m2r"][0] >= 0.95 and scores["m2r"][1] >= 0.9
          and scores["bgm2r"][0] >= 0.95 and scores["bgm2r"][1] >= 0.9
          and scores["annr"][0] >= 0.95 and total < 900.0)
    detail = ", ".join(f"{m} cal {c:.3f} spatial {s:.3f}" for m, (c, s) in scores.items())
    record(3, "twin recovery (20x20, 5+3 gauges, 1440 steps)", ok,
           f"{detail}; {total:.0f} s (< 900 s)")


def test_04_method_ordering(twin):
    ur = _run(twin, UR)
    m2r = _run(twin, M2R, warm_start=ur.control.theta)
    local = _run(twin, DISTRIBUTED_LOCAL, warm_start=m2r.params.values)
    ok = local.cost <= m2r.cost + 1e-6 and m2r.cost <= ur.cost + 1e-6
    record(4, "J(distributed local) <= J(M2R) <= J(UR) with warm starts", ok,
           f"{local.cost:.6g} <= {m2r.cost:.6g} <= {ur.cost:.6g}")


def test_07_lcurve(twin):
    alphas = list(DEFAULT_ALPHAS)
    knee_costs = [10, 6, 3, 1.2, 1.0, 0.95, 0.92, 0.9, 0.89, 0.885, 0.88, 0.879]
    knee_dists = [0.0, 0.1, 0.2, 0.35, 0.5, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0]
    knee = alphas[select_corner(alphas, knee_costs, knee_dists)]
    ldb = _run(twin, BGM2R).ldb
    curve = ldb.lcurve
    j_star = curve.costs[curve.corner]
    j_zero = twin["cal"].cost_uniform(ldb.sample.members.mean(axis=0))
    lines = curve.to_csv().splitlines()
    ok = (curve.alphas == list(range(-1, 11)) and len(lines) == 13 and knee == 3
          and j_star <= j_zero)
    record(7, "L-curve (12 alphas, knee, J(mean*) <= J(prior average))", ok,
           f"{len(curve.alphas)} points, knee alpha {knee} (expected 3), alpha* {curve.alpha}, "
           f"J* {j_star:.4f} <= J0 {j_zero:.4f}")


# -- 5, 6: Bayesian estimator -------------------------------------------------

def test_05_posterior_matches_brute_force():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 101))
        members = rng.uniform([1, 1, -50, 1], [2000, 1000, 50, 1000], size=(n, 4))
        density = rng.uniform(0.5, 2.0, size=n)
        costs = rng.uniform(0.05, 2.0, size=n)
        alpha = int(rng.integers(-1, 11))
        est = posterior_mean_var(EnsembleSample(members, density, costs), alpha)
        j_min = min(costs)
        w = [math.exp(-(2.0 ** alpha) * (c / j_min - 1.0) ** 2) * f
             for c, f in zip(costs, density)]
        k = math.fsum(w)
        for d in range(4):
            mean = math.fsum(wi * m[d] for wi, m in zip(w, members)) / k
            var = math.fsum(wi * (m[d] - mean) ** 2 for wi, m in zip(w, members)) / k
            worst = max(worst, abs(est.mean[d] - mean) / abs(mean),
                        abs(est.variance[d] - var) / max(var, 1e-300))
    record(5, "posterior mean/variance vs brute force (50 ensembles, N <= 100)",
           worst < 1e-12, f"max rel diff {worst:.2e} (< 1e-12)")


def test_06_likelihood_table():
    cases = [(1.0, -1, 1.0), (1.0, 4, 1.0), (1.0, 10, 1.0),
             (2.0, 0, math.exp(-1)), (2.0, 1, math.exp(-2))]
    worst = max(abs(likelihood(r, 1.0, a) - v) / v for r, a, v in cases)
    record(6, "likelihood table", worst < 1e-12, f"max rel err {worst:.2e} (< 1e-12)")


# -- 8, 9: invariants ---------------------------------------------------------

def test_08_closed_catchment_conservation():
    worst = 0.0
    b = Bounds.default()
    for seed in range(10):
        rng = np.random.default_rng(seed)
        plan = DrainagePlan(random_drainage(6, 6, rng))
        n, n_t = plan.n_active, 200
        precip = rng.gamma(0.4, 5.0, size=(n_t, n)) * (rng.random((n_t, 1)) < 0.5)
        forcing = ForcingSeries(precip, np.zeros((n_t, n)))
        values = b.lower[:, None] + b.width[:, None] * rng.uniform(0.01, 0.99, size=(4, n))
        values[2] = 0.0
        (ledger,) = simulate(plan, forcing, ParameterFields(values, b)).ledger
        worst = max(worst, ledger.relative_error)
    record(8, "closed-catchment mass balance (10 runs)", worst < 1e-6,
           f"max relative error {worst:.2e} (< 1e-6)")


def test_09_bound_safety_fuzz():
    rng = np.random.default_rng(0)
    b = Bounds.default()
    violations = 0
    for i in range(10_000):
        n_desc, n = int(rng.integers(1, 8)), int(rng.integers(1, 30))
        desc = DescriptorStack([f"d{k}" for k in range(n_desc)], rng.random((n_desc, n)))
        scale = 10.0 ** rng.uniform(-2, 3)
        if i % 2:
            ctrl = RegressionControl(rng.normal(0, scale, 4), rng.normal(0, scale, (4, n_desc)), b)
        else:
            ctrl = MlpControl.initialize(n_desc, (int(rng.integers(1, 9)),), int(rng.integers(1e9)), b)
            ctrl = ctrl.with_vector(ctrl.to_vector() * scale)
        v = apply_control(ctrl, desc).values
        violations += int(np.sum(~((v > b.lower[:, None]) & (v < b.upper[:, None]))))
    record(9, "bound safety fuzz (1e4 controls)", violations == 0,
           f"{violations} values outside the open bounds")


# -- 10: determinism ----------------------------------------------------------

def test_10_protocol_is_thread_invariant(tmp_path):
    cfg = tmp_path / "twin.ini"
    cfg.write_text("""
[experiment]
methods = uniform_local, distributed_local, ur, m2r, bgm2r, annr
seed = 11

[synthetic]
nrows = 8
ncols = 8
n_steps = 480
n_gauges = 5
n_donors = 3
min_gauge_cells = 3

[optimizer]
max_iter = 15
sbs_max_iter = 6
adam_max_iter = 30
mlp_hidden = 8, 8

[bayes]
size = 64
""")
    data = tmp_path / "data"
    assert main(["synth", "--config", str(cfg), "--out-dir", str(data)]) == 0
    ini = str(data / "protocol.ini")
    assert main(["protocol", "--config", ini, "--threads", "1", "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["protocol", "--config", ini, "--threads", "4", "--out-dir", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a" / "scores").iterdir())
    same = [(tmp_path / "a/scores" / f).read_bytes() == (tmp_path / "b/scores" / f).read_bytes()
            for f in files]
    record(10, "protocol score CSVs identical for --threads 1 and 4", len(files) == 7 and all(same),
           f"{sum(same)}/{len(files)} score files identical")


# -- 11: optimizers -----------------------------------------------------------

def test_11_optimizer_sanity():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(10, 10))
    a = m @ m.T + 10 * np.eye(10)
    rhs = rng.normal(size=10)
    x, _ = lbfgsb_minimize(lambda x: (0.5 * x @ a @ x - rhs @ x, a @ x - rhs), np.zeros(10),
                           None, OptimizerConfig(grad_tol=1e-12, cost_rel_tol=1e-16))
    lb_err = float(np.max(np.abs(x - np.linalg.solve(a, rhs))))

    b = Bounds.default()
    target = b.lower + b.width * np.array([0.31, 0.77, 0.42, 0.12])
    xs, _ = sbs_minimize(lambda x: float(np.sum(((x - target) / b.width) ** 2)), b)
    sbs_err = float(np.max(np.abs(xs - target) / b.width))
    record(11, "optimizer sanity (L-BFGS-B 10-d SPD, SBS interior optimum)",
           lb_err < 1e-8 and sbs_err < 1e-2,
           f"L-BFGS-B max abs err {lb_err:.1e} (< 1e-8), SBS err {sbs_err:.1e} x width (< 1e-2)")
