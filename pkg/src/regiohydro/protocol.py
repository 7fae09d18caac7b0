"""Split-sample comparison of calibration methods.

Every method is calibrated on the donor gauges over one period and scored
by NSE on four groups: donors over the same period (``cal``), donors over
the other period (``temporal_val``), pseudo-ungauged gauges over the same
period (``spatial_val``) and over the other one (``spatiotemporal_val``).
Both fold directions are run. Local methods produce one model per donor
catchment and have nothing to transfer, so they are scored on the first
two groups only.

Bundle layout under the output directory::

    scores/<method>.csv        gauge_id,period,phase,nse
    scores/summary.csv         medians and boxplot quantiles
    params/<method>_<fold>_<param>.asc
    params/summary.csv         median, mean, std per map
    stability/<method>_<param>.asc   (theta_P2 - theta_P1) / (u - l)
    controls/<method>_<fold>.json
    reports/<method>_<fold>.csv      iter,J,grad_inf_norm
    lcurve.csv, lcurve_P2.csv        BGM2R L-curves of each fold
    manifest.json
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UserError
from .grid import DrainagePlan, normalize_descriptors
from .mapping import dumps_control
from .model import PARAM_NAMES
from .objective import nse
from .optimize import BGM2R, LOCAL_METHODS, calibrate
from .problem import CalibrationSetup
from .rasters import (
    attach_observed,
    read_descriptors,
    read_discharge,
    read_flow_dir,
    read_forcing,
    read_gauges,
    write_cell_map,
)

log = logging.getLogger(__name__)

FOLDS = ("P1", "P2")
PHASES = ("cal", "temporal_val", "spatial_val", "spatiotemporal_val")
QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class Experiment:
    plan: DrainagePlan
    descriptors: object
    forcing: object
    gauges: object
    donors: tuple
    ungauged: tuple
    periods: dict


def load_experiment(cfg):
    """Read every input named in ``cfg.data``."""
    data = cfg.data
    missing = [k for k in ("drainage", "descriptors", "forcing", "gauges", "observed")
               if k not in data]
    if missing:
        raise UserError(f"[data] is missing {missing}")
    for path in (data["drainage"], *data["descriptors"], data["gauges"], data["observed"]):
        if not Path(path).is_file():
            raise UserError(f"input file not found: {path}")
    if not Path(data["forcing"]).exists():
        raise UserError(f"input file not found: {data['forcing']}")
    codes, active, grid = read_flow_dir(data["drainage"])
    plan = DrainagePlan(codes, grid.cellsize, active, grid.xllcorner, grid.yllcorner)
    descriptors = normalize_descriptors(read_descriptors(data["descriptors"], plan))
    forcing = read_forcing(data["forcing"], plan, data.get("dt", 3600.0))
    gauges = attach_observed(plan, read_gauges(data["gauges"]), read_discharge(data["observed"]))
    for gauge in gauges.gauges:
        if gauge.observed.size != forcing.n_steps:
            raise UserError(f"gauge {gauge.gauge_id}: {gauge.observed.size} observations "
                            f"for {forcing.n_steps} forcing steps")
    known = set(gauges.ids)
    unknown = sorted((set(cfg.donors) | set(cfg.ungauged)) - known)
    if unknown:
        raise UserError(f"gauges not in the registry: {unknown}")
    if not cfg.donors:
        raise UserError("no donor gauges configured")
    periods = cfg.periods or {"P1": (0, forcing.n_steps // 2),
                              "P2": (forcing.n_steps // 2, forcing.n_steps)}
    cfg.validate(forcing.n_steps)
    return Experiment(plan, descriptors, forcing, gauges, tuple(sorted(cfg.donors)),
                      tuple(sorted(cfg.ungauged)), periods)


def make_setup(exp, gauge_ids, period, cfg):
    t0, t1 = exp.periods[period]
    gauges = exp.gauges.select(exp.plan, list(gauge_ids), t0, t1)
    return CalibrationSetup(exp.plan, exp.forcing.window(t0, t1), gauges, exp.descriptors,
                            cfg.bounds, cfg.cost)


def gauge_scores(setup, params):
    """NSE of ``params`` at every gauge of ``setup`` after the warm-up."""
    q = setup.discharge(params)
    w = setup.cost_config.warmup(q.shape[1])
    return {g.gauge_id: float(nse(q[k, w:], g.observed[w:]))
            for k, g in enumerate(setup.gauges.gauges)}


@dataclass
class FoldResult:
    method: str
    fold: str
    result: object = None
    scores: list = field(default_factory=list)    # (gauge_id, period, phase, nse)
    error: str | None = None


def _other(fold):
    return FOLDS[1 - FOLDS.index(fold)]


def _run_fold(exp, cfg, method, fold, bayes_threads):
    out = FoldResult(method, fold)
    try:
        setup = make_setup(exp, exp.donors, fold, cfg)
        res = calibrate(method, setup, cfg.optimizer, cfg.bayes_size, cfg.bayes_seed,
                        bayes_threads)
        out.result = res
        groups = [("cal", exp.donors, fold), ("temporal_val", exp.donors, _other(fold))]
        if method not in LOCAL_METHODS and exp.ungauged:
            groups += [("spatial_val", exp.ungauged, fold),
                       ("spatiotemporal_val", exp.ungauged, _other(fold))]
        for phase, ids, period in groups:
            if method in LOCAL_METHODS:
                scores = {}
                for gid in ids:
                    single = make_setup(exp, [gid], period, cfg)
                    scores.update(gauge_scores(single, res.per_gauge[gid].params))
            else:
                scores = gauge_scores(make_setup(exp, ids, period, cfg), res.params)
            out.scores += [(gid, period, phase, scores[gid]) for gid in sorted(scores)]
    except Exception as exc:  # isolate per-method failures
        log.exception("method %s on %s failed", method, fold)
        out.error = f"{type(exc).__name__}: {exc}"
        out.result = None
        out.scores = []
    return out


def _fmt(v):
    return repr(float(v))


def _score_summary(rows_by_method):
    lines = ["method,phase,n,min,q25,median,q75,max"]
    for method, rows in rows_by_method.items():
        for phase in PHASES:
            values = np.array([r[3] for r in rows if r[2] == phase])
            if values.size == 0:
                continue
            qs = np.quantile(values, QUANTILES)
            lines.append(f"{method},{phase},{values.size}," + ",".join(_fmt(q) for q in qs))
    return "\n".join(lines) + "\n"


@dataclass
class ProtocolBundle:
    out_dir: Path
    folds: dict                  # (method, fold) -> FoldResult
    partial: bool
    manifest: dict

    def scores(self, method):
        rows = []
        for fold in FOLDS:
            fr = self.folds.get((method, fold))
            if fr is not None:
                rows += fr.scores
        return rows

    def median(self, method, phase):
        values = [r[3] for r in self.scores(method) if r[2] == phase]
        return float(np.median(values)) if values else float("nan")


def run_protocol(cfg, out_dir, threads=1):
    """Run every configured method on both folds and write the bundle.

    Calibrations run concurrently on ``threads`` workers; each artifact is
    written afterwards by this thread in a fixed order, so the files do not
    depend on ``threads``.
    """
    exp = load_experiment(cfg)
    out = Path(out_dir)
    for sub in ("scores", "params", "stability", "controls", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    jobs = [(m, f) for m in cfg.methods for f in FOLDS]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(lambda mf: _run_fold(exp, cfg, mf[0], mf[1], 1), jobs))
    else:
        done = [_run_fold(exp, cfg, m, f, 1) for m, f in jobs]
    folds = {(fr.method, fr.fold): fr for fr in done}

    rows_by_method = {}
    for method in cfg.methods:
        rows = [r for f in FOLDS for r in folds[(method, f)].scores]
        rows_by_method[method] = rows
        lines = ["gauge_id,period,phase,nse"]
        lines += [f"{g},{p},{ph},{_fmt(v)}" for g, p, ph, v in rows]
        (out / "scores" / f"{method}.csv").write_text("\n".join(lines) + "\n")
    (out / "scores" / "summary.csv").write_text(_score_summary(rows_by_method))

    summary = ["method,fold,param,median,mean,std"]
    bounds = cfg.bounds
    for method in cfg.methods:
        maps = {}
        for fold in FOLDS:
            res = folds[(method, fold)].result
            if res is None:
                continue
            maps[fold] = res.params.values
            for k, name in enumerate(PARAM_NAMES):
                v = res.params.values[k]
                write_cell_map(out / "params" / f"{method}_{fold}_{name}.asc", exp.plan, v)
                summary.append(f"{method},{fold},{name},{_fmt(np.median(v))},"
                               f"{_fmt(np.mean(v))},{_fmt(np.std(v))}")
            (out / "reports" / f"{method}_{fold}.csv").write_text(res.report.to_csv())
            if res.control is not None:
                (out / "controls" / f"{method}_{fold}.json").write_text(
                    dumps_control(res.control))
            if method == BGM2R and res.ldb is not None:
                name = "lcurve.csv" if fold == "P1" else f"lcurve_{fold}.csv"
                (out / name).write_text(res.ldb.lcurve.to_csv())
        if len(maps) == 2:
            change = (maps["P2"] - maps["P1"]) / bounds.width[:, None]
            for k, name in enumerate(PARAM_NAMES):
                write_cell_map(out / "stability" / f"{method}_{name}.asc", exp.plan, change[k])
    (out / "params" / "summary.csv").write_text("\n".join(summary) + "\n")

    failures = {f"{m}/{f}": fr.error for (m, f), fr in folds.items() if fr.error}
    manifest = {
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "methods": list(cfg.methods),
        "donors": list(exp.donors),
        "ungauged": list(exp.ungauged),
        "periods": {k: list(v) for k, v in exp.periods.items()},
        "partial": bool(failures),
        "failures": failures,
        "costs": {f"{m}/{f}": (None if fr.result is None else float(fr.result.cost))
                  for (m, f), fr in sorted(folds.items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ProtocolBundle(out, folds, bool(failures), manifest)


def summarize_bundle(out_dir):
    """Score summary table of an existing bundle as text."""
    path = Path(out_dir) / "scores" / "summary.csv"
    if not path.is_file():
        raise UserError(f"no protocol bundle at {out_dir} ({path} missing)")
    return path.read_text()
