import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regiohydro.errors import InvalidForcing
from regiohydro.grid import DrainagePlan
from regiohydro.model import (
    Bounds,
    ForcingSeries,
    ParameterFields,
    StateFields,
    release_fraction,
    route,
    simulate,
    step_cell,
)
from regiohydro.synthetic import random_drainage


def reference_step(p, e, hp, hft, cp, cft, kexc):
    """Plain-float transcription of one cell step."""
    pn, en = max(p - e, 0.0), max(e - p, 0.0)
    ps = cp * (1 - hp ** 2) * math.tanh(pn / cp) / (1 + hp * math.tanh(pn / cp))
    es = hp * cp * (2 - hp) * math.tanh(en / cp) / (1 + (1 - hp) * math.tanh(en / cp))
    hp_new = min(max(hp + (ps - es) / cp, 0.0), 1.0)
    pr = pn - ps
    f = kexc * hft ** 3.5
    r = hft + (0.9 * pr + f) / cft
    spill = 0.0
    if r > 1.0:
        spill = (r - 1.0) * cft
        r = 1.0
    r = max(r, 0.0)
    damp = (1 + r ** 4) ** -0.25
    qft = cft * r * (1 - damp) + spill
    qd = max(0.1 * pr + f, 0.0)
    return (hp_new, r * damp), qft + qd


@pytest.mark.parametrize("p,e,hp,hft,cp,cft,kexc", [
    (5.0, 0.1, 0.5, 0.5, 300.0, 120.0, -1.0),
    (0.0, 0.3, 0.4, 0.3, 200.0, 50.0, 2.0),
    (40.0, 0.0, 0.9, 0.8, 100.0, 20.0, 5.0),
    (0.0, 0.0, 0.5, 0.5, 1000.0, 500.0, 0.0),
])
def test_step_matches_reference(p, e, hp, hft, cp, cft, kexc):
    (hp1, hft1), qt = step_cell(p, e, (hp, hft), (cp, cft, kexc))
    (hp_ref, hft_ref), qt_ref = reference_step(p, e, hp, hft, cp, cft, kexc)
    assert hp1 == pytest.approx(hp_ref, rel=1e-12)
    assert hft1 == pytest.approx(hft_ref, rel=1e-12)
    assert qt == pytest.approx(qt_ref, rel=1e-12)


def test_release_fraction_for_one_hour_lag():
    assert release_fraction(60.0, 3600.0) == pytest.approx(1 - math.exp(-1), rel=1e-15)
    assert round(release_fraction(60.0, 3600.0), 4) == 0.6321


def test_single_route_step(chain_plan):
    q, hlr = route(chain_plan, np.array([1.0, 0.0, 0.0]), np.zeros(3), np.full(3, 60.0))
    f = 1 - math.exp(-1)
    v0 = 1.0 * 1e6 * 1e-3           # 1 mm over 1 km² in m³
    assert q[0] == pytest.approx(v0 * f / 3600.0, rel=1e-14)
    assert q[1] == pytest.approx(v0 * f * f / 3600.0, rel=1e-14)
    assert hlr[0] == pytest.approx(v0 * (1 - f), rel=1e-14)


def test_chain_reaches_steady_state(chain_plan):
    qt = np.array([0.5, 0.2, 0.3])
    hlr = np.zeros(3)
    for _ in range(400):
        q, hlr = route(chain_plan, qt, hlr, np.full(3, 30.0))
    expected = qt.sum() * 1e6 * 1e-3 / 3600.0
    assert q[2] == pytest.approx(expected, rel=1e-12)


def test_forcing_rejects_nan():
    with pytest.raises(InvalidForcing):
        ForcingSeries(np.array([[np.nan]]), np.zeros((1, 1)))


def test_forcing_rejects_negative():
    with pytest.raises(InvalidForcing):
        ForcingSeries(np.array([[-1.0]]), np.zeros((1, 1)))


def test_states_stay_in_range(desk):
    res = simulate(desk.plan, desk.forcing, desk.params, store_states=True)
    hp, hft, hlr = res.history
    assert hp.min() >= 0 and hp.max() <= 1
    assert hft.min() >= 0 and hft.max() <= 1
    assert hlr.min() >= 0
    assert np.all(res.q >= 0)


def test_outlet_series_matches_recorded_cells(desk):
    full = simulate(desk.plan, desk.forcing, desk.params)
    out = desk.plan.outlets()
    part = simulate(desk.plan, desk.forcing, desk.params, out_cells=out)
    assert np.array_equal(full.q[:, out], part.q)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_closed_catchment_conserves_mass(seed):
    rng = np.random.default_rng(seed)
    plan = DrainagePlan(random_drainage(4, 5, rng))
    n, n_t = plan.n_active, 60
    precip = rng.gamma(0.5, 6.0, size=(n_t, n))
    forcing = ForcingSeries(precip, np.zeros((n_t, n)))
    b = Bounds.default()
    values = b.lower[:, None] + b.width[:, None] * rng.uniform(0.01, 0.99, size=(4, n))
    values[2] = 0.0
    res = simulate(plan, forcing, ParameterFields(values, b))
    (ledger,) = res.ledger
    assert ledger.exchange == 0.0
    assert ledger.relative_error < 1e-9


def test_default_states():
    s = StateFields.default(3)
    assert s.hp.tolist() == [0.5] * 3 and s.hft.tolist() == [0.5] * 3
    assert s.hlr.tolist() == [0.0] * 3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_balance_closes_with_exchange_and_evaporation(seed):
    rng = np.random.default_rng(seed)
    plan = DrainagePlan(random_drainage(4, 4, rng))
    n, n_t = plan.n_active, 80
    precip = rng.gamma(0.5, 6.0, size=(n_t, n))
    pet = rng.uniform(0.0, 0.5, size=(n_t, n))
    b = Bounds.default()
    values = b.lower[:, None] + b.width[:, None] * rng.uniform(0.01, 0.99, size=(4, n))
    res = simulate(plan, ForcingSeries(precip, pet), ParameterFields(values, b))
    (ledger,) = res.ledger
    assert abs(ledger.residual) <= 1e-9 * (ledger.precip + abs(ledger.exchange))
