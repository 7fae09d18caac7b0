"""Gridded GR-like rainfall-runoff model.

Per cell and timestep: rainfall/PET neutralisation, a production store
(normalised level ``h_p``), a signed groundwater exchange, a transfer store
(normalised level ``h_ft``) with a 90/10 split between the store and a
direct branch, then a linear reservoir per cell routed along the D8 plan.

Units: precipitation, PET and local runoff in mm per timestep; capacities in
mm; ``k_exc`` in mm per timestep; ``l_r`` in minutes; routing volumes in m³
and discharge in m³/s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DimensionMismatch, InvalidForcing

PARAM_NAMES = ("cp", "cft", "kexc", "lr")
N_PARAMS = 4
STATE_NAMES = ("hp", "hft", "hlr")

TRANSFER_SPLIT = 0.9
EXCHANGE_EXPONENT = 3.5
MM_TO_M = 1e-3

DEFAULT_LOWER = np.array([1.0, 1.0, -50.0, 1.0])
DEFAULT_UPPER = np.array([2000.0, 1000.0, 50.0, 1000.0])


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64).copy()
        upper = np.asarray(self.upper, dtype=np.float64).copy()
        if lower.shape != (N_PARAMS,) or upper.shape != (N_PARAMS,):
            raise DimensionMismatch("bounds need one (lower, upper) pair per parameter")
        if np.any(upper <= lower):
            raise ValueError(f"upper bounds must exceed lower bounds: {lower} / {upper}")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def default(cls):
        return cls(DEFAULT_LOWER, DEFAULT_UPPER)

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, values, strict=False):
        v = np.asarray(values)
        lo = self.lower.reshape((-1,) + (1,) * (v.ndim - 1))
        hi = self.upper.reshape((-1,) + (1,) * (v.ndim - 1))
        if strict:
            return bool(np.all((v > lo) & (v < hi)))
        return bool(np.all((v >= lo) & (v <= hi)))


@dataclass
class ParameterFields:
    """The four parameter maps over active cells, shape (4, n_active)."""

    values: np.ndarray
    bounds: Bounds

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != N_PARAMS:
            raise DimensionMismatch("parameter values must have shape (4, n_active)")
        if not self.bounds.contains(self.values):
            raise ValueError("parameter fields violate their bounds")

    @classmethod
    def uniform(cls, theta, n_cells, bounds=None):
        theta = np.asarray(theta, dtype=np.float64)
        return cls(np.repeat(theta[:, None], n_cells, axis=1), bounds or Bounds.default())

    @property
    def n_cells(self):
        return self.values.shape[1]

    cp = property(lambda self: self.values[0])
    cft = property(lambda self: self.values[1])
    kexc = property(lambda self: self.values[2])
    lr = property(lambda self: self.values[3])


@dataclass
class StateFields:
    hp: np.ndarray
    hft: np.ndarray
    hlr: np.ndarray

    @classmethod
    def default(cls, n_cells, hp=0.5, hft=0.5):
        return cls(np.full(n_cells, hp), np.full(n_cells, hft), np.zeros(n_cells))

    def copy(self):
        return StateFields(self.hp.copy(), self.hft.copy(), self.hlr.copy())


@dataclass
class ForcingSeries:
    """Precipitation and PET, shape (n_t, n_active), mm per timestep."""

    precip: np.ndarray
    pet: np.ndarray
    dt: float = 3600.0

    def __post_init__(self):
        self.precip = np.ascontiguousarray(self.precip, dtype=np.float64)
        self.pet = np.ascontiguousarray(self.pet, dtype=np.float64)
        if self.precip.shape != self.pet.shape or self.precip.ndim != 2:
            raise DimensionMismatch("precip and pet must share shape (n_t, n_active)")
        for name, arr in (("precip", self.precip), ("pet", self.pet)):
            if not np.all(np.isfinite(arr)):
                raise InvalidForcing(f"{name} contains NaN or infinite values")
            if np.any(arr < 0):
                raise InvalidForcing(f"{name} contains negative values")
        if not self.dt > 0:
            raise InvalidForcing("dt must be positive")

    @property
    def n_steps(self):
        return self.precip.shape[0]

    def window(self, t0, t1):
        return ForcingSeries(self.precip[t0:t1], self.pet[t0:t1], self.dt)


@numba.njit(cache=True, nogil=True)
def exchange_factor(hft):
    """h_ft ** 3.5 without a generic power call."""
    return hft * hft * hft * math.sqrt(hft)


@numba.njit(cache=True, nogil=True)
def cell_physics(p, e, hp, hft, cp, cft, kexc):
    """One production/exchange/transfer step for a single cell.

    Returns (hp_new, hft_new, local_runoff, actual_evaporation, exchange),
    fluxes in mm.
    """
    pn = max(p - e, 0.0)
    en = max(e - p, 0.0)
    ps = 0.0
    if pn > 0.0:
        tp = math.tanh(pn / cp)
        ps = cp * (1.0 - hp * hp) * tp / (1.0 + hp * tp)
    es = 0.0
    if en > 0.0:
        te = math.tanh(en / cp)
        es = hp * cp * (2.0 - hp) * te / (1.0 + (1.0 - hp) * te)
    hp_new = min(max(hp + (ps - es) / cp, 0.0), 1.0)
    pr = pn - ps

    f = kexc * exchange_factor(hft)
    r = hft + (TRANSFER_SPLIT * pr + f) / cft
    spill = 0.0
    # exchange actually applied: the flux enters both branches, plus any
    # water the clamps add
    exchange = 2.0 * f
    if r > 1.0:
        spill = (r - 1.0) * cft
        r = 1.0
    elif r < 0.0:
        exchange -= r * cft
        r = 0.0
    r2 = r * r
    damp = 1.0 / math.sqrt(math.sqrt(1.0 + r2 * r2))
    hft_new = r * damp
    qft = cft * r * (1.0 - damp) + spill
    direct = (1.0 - TRANSFER_SPLIT) * pr + f
    qd = 0.0
    if direct > 0.0:
        qd = direct
    else:
        exchange -= direct
    return hp_new, hft_new, qft + qd, (p - pn) + es, exchange


@numba.njit(cache=True, nogil=True)
def release_fraction(lr, dt):
    return 1.0 - math.exp(-dt / (60.0 * lr))


@numba.njit(cache=True, nogil=True)
def _route_step(order, downstream, qt, hlr, frac, dt, area, q, vol):
    """Route one timestep in place; fills ``q`` (m³/s), ``vol`` and ``hlr``.

    ``vol`` must arrive zeroed: it accumulates upstream inflow volume before
    holding each reservoir's pre-release volume.
    """
    n = qt.size
    inflow = vol
    for k in range(n):
        i = order[k]
        v = hlr[i] + inflow[i] + qt[i] * area * MM_TO_M
        inflow[i] = v
        q[i] = v * frac[i] / dt
        hlr[i] = v * (1.0 - frac[i])
        d = downstream[i]
        if d >= 0:
            inflow[d] += q[i] * dt


@numba.njit(cache=True, nogil=True)
def forward_kernel(order, downstream, precip, pet, cp, cft, kexc, lr,
                   hp0, hft0, hlr0, dt, area, out_idx, store):
    n_t, n = precip.shape
    hp = hp0.copy()
    hft = hft0.copy()
    hlr = hlr0.copy()
    frac = np.empty(n)
    for i in range(n):
        frac[i] = release_fraction(lr[i], dt)
    q_out = np.zeros((n_t, out_idx.size))
    n_hist = n_t + 1 if store else 1
    hp_hist = np.empty((n_hist, n))
    hft_hist = np.empty((n_hist, n))
    hlr_hist = np.empty((n_hist, n))
    qt_hist = np.empty((n_hist, n))
    cum_p = np.zeros(n)
    cum_ea = np.zeros(n)
    cum_x = np.zeros(n)
    cum_out = np.zeros(n)
    qt = np.empty(n)
    q = np.empty(n)
    vol = np.empty(n)
    for t in range(n_t):
        if store:
            hp_hist[t] = hp
            hft_hist[t] = hft
            hlr_hist[t] = hlr
        for i in range(n):
            hp_i, hft_i, qt_i, ea_i, x_i = cell_physics(
                precip[t, i], pet[t, i], hp[i], hft[i], cp[i], cft[i], kexc[i]
            )
            hp[i] = hp_i
            hft[i] = hft_i
            qt[i] = qt_i
            if store:
                qt_hist[t, i] = qt_i
            cum_p[i] += precip[t, i]
            cum_ea[i] += ea_i
            cum_x[i] += x_i
        vol[:] = 0.0
        _route_step(order, downstream, qt, hlr, frac, dt, area, q, vol)
        for i in range(n):
            cum_out[i] += q[i] * dt
        for k in range(out_idx.size):
            q_out[t, k] = q[out_idx[k]]
    if store:
        hp_hist[n_t] = hp
        hft_hist[n_t] = hft
        hlr_hist[n_t] = hlr
    return (q_out, hp, hft, hlr, hp_hist, hft_hist, hlr_hist, qt_hist,
            cum_p, cum_ea, cum_x, cum_out)


def step_cell(p, e, state, params):
    """Advance one cell by one timestep.

    ``state`` is ``(h_p, h_ft)`` and ``params`` is ``(c_p, c_ft, k_exc)``
    (``l_r`` only matters for routing). Returns ``((h_p, h_ft), q_t)``.
    """
    hp, hft = state
    cp, cft, kexc = params[:3]
    hp1, hft1, qt, _, _ = cell_physics(float(p), float(e), float(hp), float(hft),
                                       float(cp), float(cft), float(kexc))
    return (hp1, hft1), qt


def route(plan, local_runoff, h_lr, l_r, dt=3600.0):
    """Route one timestep of local runoff (mm) through the drainage plan.

    Returns ``(Q, new_h_lr)`` with Q in m³/s per active cell.
    """
    qt = np.ascontiguousarray(local_runoff, dtype=np.float64)
    hlr = np.array(h_lr, dtype=np.float64)
    lr = np.asarray(l_r, dtype=np.float64)
    frac = np.array([release_fraction(v, dt) for v in lr])
    q = np.empty(plan.n_active)
    vol = np.zeros(plan.n_active)
    _route_step(plan.topo_order, plan.downstream, qt, hlr, frac, float(dt),
                plan.cell_area, q, vol)
    return q, hlr


@dataclass
class WaterBalance:
    """Cumulative volumes (m³) over the catchment draining to ``cell``."""

    cell: int
    precip: float
    evaporation: float
    exchange: float
    storage_change: float
    outflow: float

    @property
    def residual(self):
        return self.precip - self.evaporation + self.exchange - self.storage_change - self.outflow

    @property
    def relative_error(self):
        return abs(self.residual) / self.precip if self.precip > 0 else abs(self.residual)


@dataclass
class SimulationResult:
    q: np.ndarray            # (n_t, n_out) m³/s
    out_cells: np.ndarray    # compact indices of the recorded cells
    final_states: StateFields
    ledger: list
    history: tuple | None = None   # (hp, hft, hlr) each (n_t+1, n) when stored


def _storage(hp, hft, hlr, params, area):
    return (hp * params.cp + hft * params.cft) * area * MM_TO_M + hlr


def simulate(plan, forcing, params, init_states=None, out_cells=None,
             ledger_cells=None, store_states=False):
    """Run the forward model over the whole forcing window.

    ``out_cells`` selects the compact cell indices whose discharge series
    are kept (all cells by default). The water-balance ledger is reported
    per catchment for ``ledger_cells`` (the outlets by default).
    """
    n = plan.n_active
    if forcing.precip.shape[1] != n or params.n_cells != n:
        raise DimensionMismatch("forcing and parameters must cover every active cell")
    if forcing.n_steps < 1:
        raise DimensionMismatch("forcing must contain at least one timestep")
    init = init_states or StateFields.default(n)
    if out_cells is None:
        out_cells = np.arange(n)
    out_cells = np.asarray(out_cells, dtype=np.int64)
    v = params.values
    (q, hp, hft, hlr, hp_h, hft_h, hlr_h, _,
     cum_p, cum_ea, cum_x, cum_out) = forward_kernel(
        plan.topo_order, plan.downstream, forcing.precip, forcing.pet,
        v[0], v[1], v[2], v[3], init.hp, init.hft, init.hlr,
        float(forcing.dt), plan.cell_area, out_cells, store_states,
    )
    final = StateFields(hp, hft, hlr)
    area = plan.cell_area
    ds = _storage(hp, hft, hlr, params, area) - _storage(init.hp, init.hft, init.hlr, params, area)
    if ledger_cells is None:
        ledger_cells = plan.outlets()
    ledger = []
    for c in ledger_cells:
        m = plan.upstream_mask(int(c))
        ledger.append(WaterBalance(
            cell=int(c),
            precip=float(cum_p[m].sum() * area * MM_TO_M),
            evaporation=float(cum_ea[m].sum() * area * MM_TO_M),
            exchange=float(cum_x[m].sum() * area * MM_TO_M),
            storage_change=float(ds[m].sum()),
            outflow=float(cum_out[c]),
        ))
    history = (hp_h, hft_h, hlr_h) if store_states else None
    return SimulationResult(q, out_cells, final, ledger, history)
