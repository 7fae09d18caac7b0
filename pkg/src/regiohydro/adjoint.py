"""Reverse-mode gradient of the calibration cost with respect to the
distributed parameter maps.

The forward sweep stores every per-step state (store-all checkpointing);
the reverse sweep walks time backwards, recomputes the step's local
quantities from the stored states, reverses the routing in inverse
topological order and then the per-cell physics. Clamp and ``max``
operations take a zero derivative on their clamped branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .model import (
    EXCHANGE_EXPONENT,
    MM_TO_M,
    PARAM_NAMES,
    TRANSFER_SPLIT,
    ParameterFields,
    StateFields,
    _route_step,
    exchange_factor,
    forward_kernel,
    release_fraction,
)
from .objective import CostConfig, j_obs


@numba.njit(cache=True, nogil=True)
def cell_physics_adjoint(p, e, hp, hft, cp, cft, kexc, a_qt, a_hp1, a_hft1):
    """Pull back adjoints of (q_t, h_p', h_ft') through one cell step.

    Returns (a_hp, a_hft, d_cp, d_cft, d_kexc).
    """
    # forward recomputation
    pn = max(p - e, 0.0)
    en = max(e - p, 0.0)
    tp = math.tanh(pn / cp) if pn > 0.0 else 0.0
    den_s = 1.0 + hp * tp
    ps = cp * (1.0 - hp * hp) * tp / den_s
    te = math.tanh(en / cp) if en > 0.0 else 0.0
    den_e = 1.0 + (1.0 - hp) * te
    es = hp * cp * (2.0 - hp) * te / den_e
    hp_raw = hp + (ps - es) / cp
    pr = pn - ps
    hft_pow = exchange_factor(hft)
    f = kexc * hft_pow
    c = TRANSFER_SPLIT * pr + f
    r_raw = hft + c / cft
    state = 0
    r = r_raw
    if r_raw > 1.0:
        state = 1
        r = 1.0
    elif r_raw < 0.0:
        state = -1
        r = 0.0
    r4 = r * r * r * r
    damp = 1.0 / math.sqrt(math.sqrt(1.0 + r4))
    qd_raw = (1.0 - TRANSFER_SPLIT) * pr + f

    a_hp = 0.0
    a_hft = 0.0
    d_cp = 0.0
    d_cft = 0.0
    d_kexc = 0.0
    a_pr = 0.0
    a_f = 0.0

    # q_t = q_ft + q_d
    if qd_raw > 0.0:
        a_pr += (1.0 - TRANSFER_SPLIT) * a_qt
        a_f += a_qt
    # q_ft = c_ft * g(r) + spill, h_ft' = r * damp
    g = r * (1.0 - damp)
    dg = 1.0 - damp + r4 * damp / (1.0 + r4)
    dh = damp / (1.0 + r4)
    d_cft += a_qt * g
    a_r = a_qt * cft * dg + a_hft1 * dh
    if state == 0:
        a_rraw = a_r
    elif state == 1:
        a_rraw = a_qt * cft
        d_cft += a_qt * (r_raw - 1.0)
    else:
        a_rraw = 0.0
    # r_raw = h_ft + c / c_ft
    a_hft += a_rraw
    a_c = a_rraw / cft
    d_cft -= a_rraw * c / (cft * cft)
    a_pr += TRANSFER_SPLIT * a_c
    a_f += a_c
    # f = k_exc * h_ft^3.5
    d_kexc += a_f * hft_pow
    if hft > 0.0:
        a_hft += a_f * kexc * EXCHANGE_EXPONENT * hft * hft * math.sqrt(hft)
    # pr = pn - ps
    a_ps = -a_pr
    # h_p' = clamp(h_p + (ps - es)/c_p)
    if 0.0 <= hp_raw <= 1.0:
        a_raw = a_hp1
    else:
        a_raw = 0.0
    a_hp += a_raw
    a_ps += a_raw / cp
    a_es = -a_raw / cp
    d_cp -= a_raw * (ps - es) / (cp * cp)
    if pn == 0.0 and en == 0.0:
        return a_hp, a_hft, d_cp, d_cft, d_kexc
    # ps = c_p (1 - h_p²) tp / (1 + h_p tp)
    num_s = cp * (1.0 - hp * hp) * tp
    d_cp += a_ps * (1.0 - hp * hp) * tp / den_s
    a_hp += a_ps * (-2.0 * cp * hp * tp * den_s - num_s * tp) / (den_s * den_s)
    a_tp = a_ps * (cp * (1.0 - hp * hp) * den_s - num_s * hp) / (den_s * den_s)
    d_cp += a_tp * (-(1.0 - tp * tp) * pn / (cp * cp))
    # es = h_p c_p (2 - h_p) te / (1 + (1 - h_p) te)
    num_e = hp * cp * (2.0 - hp) * te
    d_cp += a_es * hp * (2.0 - hp) * te / den_e
    a_hp += a_es * (cp * (2.0 - 2.0 * hp) * te * den_e + num_e * te) / (den_e * den_e)
    a_te = a_es * (hp * cp * (2.0 - hp) * den_e - num_e * (1.0 - hp)) / (den_e * den_e)
    d_cp += a_te * (-(1.0 - te * te) * en / (cp * cp))
    return a_hp, a_hft, d_cp, d_cft, d_kexc


@numba.njit(cache=True, nogil=True)
def _route_step_adjoint(order, downstream, hlr_prev, qt, frac, dfrac, dt, area,
                        a_q_ext, a_hlr, a_qt, d_lr):
    """Reverse one routing step; ``a_hlr`` is updated in place to the
    adjoint of the previous reservoir volume."""
    n = qt.size
    # recompute the volumes of this step
    inflow = np.zeros(n)
    vol = np.empty(n)
    for k in range(n):
        i = order[k]
        v = hlr_prev[i] + inflow[i] + qt[i] * area * MM_TO_M
        vol[i] = v
        d = downstream[i]
        if d >= 0:
            inflow[d] += v * frac[i]
    a_vol = np.zeros(n)
    for k in range(n - 1, -1, -1):
        i = order[k]
        a_q = a_q_ext[i]
        d = downstream[i]
        if d >= 0:
            a_q += a_vol[d] * dt
        v = vol[i]
        a_v = a_q * frac[i] / dt + a_hlr[i] * (1.0 - frac[i])
        a_frac = a_q * v / dt - a_hlr[i] * v
        d_lr[i] += a_frac * dfrac[i]
        a_vol[i] = a_v
        a_hlr[i] = a_v
        a_qt[i] = a_v * area * MM_TO_M


@numba.njit(cache=True, nogil=True)
def adjoint_kernel(order, downstream, precip, pet, cp, cft, kexc, lr,
                   hp_hist, hft_hist, hlr_hist, qt_hist, dt, area, a_q):
    """Gradient of a cost whose sensitivity to Q(t, cell) is ``a_q``."""
    n_t, n = precip.shape
    frac = np.empty(n)
    dfrac = np.empty(n)
    for i in range(n):
        frac[i] = release_fraction(lr[i], dt)
        x = dt / (60.0 * lr[i])
        dfrac[i] = -math.exp(-x) * x / lr[i]
    g_cp = np.zeros(n)
    g_cft = np.zeros(n)
    g_kexc = np.zeros(n)
    g_lr = np.zeros(n)
    a_hp = np.zeros(n)
    a_hft = np.zeros(n)
    a_hlr = np.zeros(n)
    a_qt = np.zeros(n)
    for t in range(n_t - 1, -1, -1):
        _route_step_adjoint(order, downstream, hlr_hist[t], qt_hist[t], frac, dfrac, dt,
                            area, a_q[t], a_hlr, a_qt, g_lr)
        for i in range(n):
            ahp, ahft, dcp, dcft, dkexc = cell_physics_adjoint(
                precip[t, i], pet[t, i], hp_hist[t, i], hft_hist[t, i],
                cp[i], cft[i], kexc[i], a_qt[i], a_hp[i], a_hft[i],
            )
            a_hp[i] = ahp
            a_hft[i] = ahft
            g_cp[i] += dcp
            g_cft[i] += dcft
            g_kexc[i] += dkexc
    return g_cp, g_cft, g_kexc, g_lr


@dataclass
class GradientFields:
    """dJ/dθ per parameter, shape (4, n_active)."""

    values: np.ndarray

    d_cp = property(lambda self: self.values[0])
    d_cft = property(lambda self: self.values[1])
    d_kexc = property(lambda self: self.values[2])
    d_lr = property(lambda self: self.values[3])


def gauge_discharge(plan, forcing, params, gauges, init_states=None, store=False):
    """Forward run recording only the gauge cells."""
    init = init_states or StateFields.default(plan.n_active)
    v = params.values
    return forward_kernel(
        plan.topo_order, plan.downstream, forcing.precip, forcing.pet,
        v[0], v[1], v[2], v[3], init.hp, init.hft, init.hlr,
        float(forcing.dt), plan.cell_area, gauges.cells, store,
    )


def cost(plan, forcing, params, gauges, cfg=None, init_states=None):
    """J_obs for given parameter maps (forward run only)."""
    q = gauge_discharge(plan, forcing, params, gauges, init_states)[0]
    return j_obs(gauges, q.T, cfg)


def gradient_theta(plan, forcing, params, gauges, cfg=None, init_states=None):
    """Return (J, GradientFields) by a forward sweep plus an adjoint sweep."""
    cfg = cfg or CostConfig()
    out = gauge_discharge(plan, forcing, params, gauges, init_states, store=True)
    q, hp_h, hft_h, hlr_h, qt_h = out[0], out[4], out[5], out[6], out[7]
    value, dq = j_obs(gauges, q.T, cfg, with_grad=True)
    a_q = np.zeros((forcing.n_steps, plan.n_active))
    for g, cell in enumerate(gauges.cells):
        a_q[:, cell] += dq[g]
    v = params.values
    grads = adjoint_kernel(
        plan.topo_order, plan.downstream, forcing.precip, forcing.pet,
        v[0], v[1], v[2], v[3], hp_h, hft_h, hlr_h, qt_h,
        float(forcing.dt), plan.cell_area, a_q,
    )
    return value, GradientFields(np.array(grads))


def route_gradient(plan, local_runoff, l_r, weights, dt=3600.0, h_lr0=None):
    """Routing-only toy: J = sum_t sum_x weights[t, x] * Q[t, x] for a given
    local-runoff series (n_t, n). Returns (J, dJ/dl_r)."""
    local_runoff = np.ascontiguousarray(local_runoff, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    n_t, n = local_runoff.shape
    lr = np.asarray(l_r, dtype=np.float64)
    frac = np.array([release_fraction(v, dt) for v in lr])
    x = dt / (60.0 * lr)
    dfrac = -np.exp(-x) * x / lr
    hlr = np.zeros(n) if h_lr0 is None else np.array(h_lr0, dtype=np.float64)
    hist = np.empty((n_t, n))
    value = 0.0
    q = np.empty(n)
    vol = np.empty(n)
    for t in range(n_t):
        hist[t] = hlr
        vol[:] = 0.0
        _route_step(plan.topo_order, plan.downstream, local_runoff[t], hlr, frac,
                    float(dt), plan.cell_area, q, vol)
        value += float(np.dot(weights[t], q))
    a_hlr = np.zeros(n)
    a_qt = np.zeros(n)
    g = np.zeros(n)
    for t in range(n_t - 1, -1, -1):
        _route_step_adjoint(plan.topo_order, plan.downstream, hist[t], local_runoff[t],
                            frac, dfrac, float(dt), plan.cell_area, weights[t],
                            a_hlr, a_qt, g)
    return value, g


@dataclass
class GradientCheckReport:
    max_rel_error: float
    rows: list          # (param, cell, adjoint, fd, rel_error)
    rejected: list      # (param, cell) probes dropped near kinks

    def per_parameter(self):
        table = {}
        for name in PARAM_NAMES:
            errs = [r[4] for r in self.rows if r[0] == name]
            table[name] = max(errs) if errs else 0.0
        return table

    def to_csv(self):
        lines = ["param,cell,adjoint,fd,rel_error"]
        for name, cell, ga, gf, err in self.rows:
            lines.append(f"{name},{cell},{ga!r},{gf!r},{err!r}")
        return "\n".join(lines) + "\n"


def _fd_probe(func, params, k, cell, h):
    values = params.values

    def at(delta):
        v = values.copy()
        v[k, cell] += delta
        return func(ParameterFields(v, params.bounds))

    j0 = func(params)
    jp = at(h)
    jm = at(-h)
    central = (jp - jm) / (2.0 * h)
    fwd = (jp - j0) / h
    bwd = (j0 - jm) / h
    return central, fwd, bwd


def check_gradient_fd(plan, forcing, params, gauges, n_probes, seed=0, cfg=None,
                      step_fraction=1e-4, kink_tolerance=0.1, abs_tol=1e-12):
    """Compare adjoint partials with central differences at random cells.

    For each parameter, ``n_probes`` distinct active cells are drawn (with a
    fixed seed). The finite-difference step is ``step_fraction * (u - l)``.
    A probe whose one-sided differences disagree by more than
    ``kink_tolerance`` (relative) straddles a clamp kink and is replaced by
    another cell.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    cfg = cfg or CostConfig()
    rng = np.random.default_rng(seed)
    _, grad = gradient_theta(plan, forcing, params, gauges, cfg)

    def func(p):
        return cost(plan, forcing, p, gauges, cfg)

    h_all = step_fraction * params.bounds.width
    lo, hi = params.bounds.lower, params.bounds.upper
    rows, rejected = [], []
    for k, name in enumerate(PARAM_NAMES):
        h = h_all[k]
        candidates = list(rng.permutation(plan.n_active))
        taken = 0
        while candidates and taken < n_probes:
            cell = int(candidates.pop(0))
            x = params.values[k, cell]
            if x - h < lo[k] or x + h > hi[k]:
                rejected.append((name, cell))
                continue
            central, fwd, bwd = _fd_probe(func, params, k, cell, h)
            scale = max(abs(fwd), abs(bwd))
            if scale > abs_tol and abs(fwd - bwd) > kink_tolerance * scale:
                rejected.append((name, cell))
                continue
            ga = float(grad.values[k, cell])
            if abs(central) <= abs_tol and abs(ga) <= abs_tol:
                err = 0.0
            else:
                err = abs(ga - central) / max(abs(central), abs_tol)
            rows.append((name, cell, ga, float(central), err))
            taken += 1
    max_err = max((r[4] for r in rows), default=0.0)
    return GradientCheckReport(max_err, rows, rejected)
