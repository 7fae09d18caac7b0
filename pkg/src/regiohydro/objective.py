"""Calibration cost: weighted multi-gauge (1 - NSE) plus optional Tikhonov term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GaugeError, LengthMismatch, MissingBackground, ZeroVarianceObs

REG_NONE = "none"
REG_TIKHONOV = "tikhonov"


@dataclass(frozen=True)
class CostConfig:
    gamma: float = 0.0
    metric: str = "nse"
    warmup_steps: int | None = None
    warmup_fraction: float = 0.1
    reg_kind: str = REG_NONE

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.metric != "nse":
            raise ValueError(f"unsupported metric {self.metric!r}")
        if self.reg_kind not in (REG_NONE, REG_TIKHONOV):
            raise ValueError(f"unknown regularization kind {self.reg_kind!r}")

    def warmup(self, n_t):
        w = self.warmup_steps
        if w is None:
            w = int(self.warmup_fraction * n_t)
        if not 0 <= w < n_t:
            raise LengthMismatch(f"warm-up of {w} steps leaves nothing of a {n_t}-step series")
        return w


def _check(sim, obs):
    sim = np.asarray(sim, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if sim.shape != obs.shape:
        raise LengthMismatch(f"simulated length {sim.shape} != observed length {obs.shape}")
    if sim.size < 2:
        raise LengthMismatch("NSE needs at least two values")
    return sim, obs


def nse(sim, obs):
    """Nash-Sutcliffe efficiency of ``sim`` against ``obs``."""
    sim, obs = _check(sim, obs)
    anomaly = obs - obs.mean()
    denom = np.dot(anomaly, anomaly)
    if not denom > 0:
        raise ZeroVarianceObs("observed series has zero variance")
    err = sim - obs
    return 1.0 - np.dot(err, err) / denom


def nse_loss_and_grad(sim, obs):
    """Return (1 - NSE, d(1 - NSE)/d sim)."""
    sim, obs = _check(sim, obs)
    anomaly = obs - obs.mean()
    denom = np.dot(anomaly, anomaly)
    if not denom > 0:
        raise ZeroVarianceObs("observed series has zero variance")
    err = sim - obs
    return np.dot(err, err) / denom, 2.0 * err / denom


def j_obs(gauges, sim, cfg=None, with_grad=False):
    """Weighted sum of per-gauge (1 - NSE) after the warm-up window.

    ``sim`` is (n_gauges, n_t) in the gauge set's order. With ``with_grad``
    also returns dJ/dsim of the same shape (zero inside the warm-up).
    """
    cfg = cfg or CostConfig()
    sim = np.asarray(sim, dtype=np.float64)
    weights = gauges.weights
    total = 0.0
    grad = np.zeros_like(sim) if with_grad else None
    for g, gauge in enumerate(gauges.gauges):
        obs = gauge.observed
        try:
            if obs is None or len(obs) != sim.shape[1]:
                raise LengthMismatch(
                    f"observed series length {None if obs is None else len(obs)} "
                    f"!= simulated length {sim.shape[1]}"
                )
            w0 = cfg.warmup(sim.shape[1])
            loss, dloss = nse_loss_and_grad(sim[g, w0:], obs[w0:])
        except (LengthMismatch, ZeroVarianceObs) as exc:
            raise GaugeError(gauge.gauge_id, exc) from exc
        total += weights[g] * loss
        if with_grad:
            grad[g, w0:] = weights[g] * dloss
    if with_grad:
        return total, grad
    return total


def j_total(rho, background, j_obs_value, cfg=None, with_grad=False):
    """J = J_obs + gamma * ||rho - rho*||² (Tikhonov) or J_obs alone."""
    cfg = cfg or CostConfig()
    rho = np.asarray(rho, dtype=np.float64)
    if cfg.reg_kind == REG_NONE or cfg.gamma == 0.0:
        return (j_obs_value, np.zeros_like(rho)) if with_grad else j_obs_value
    if background is None:
        raise MissingBackground("Tikhonov regularization needs a background control")
    diff = rho - np.asarray(background, dtype=np.float64)
    value = j_obs_value + cfg.gamma * np.dot(diff, diff)
    if with_grad:
        return value, 2.0 * cfg.gamma * diff
    return value
