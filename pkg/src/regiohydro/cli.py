"""Command-line front end.

Exit codes: 0 success, 1 user or data error (message on stderr), 2
internal error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bayes
from .adjoint import check_gradient_fd
from .config import ExperimentConfig, load_config
from .errors import HydroError, UserError
from .mapping import UniformControl, dumps_control, loads_control
from .model import PARAM_NAMES, ParameterFields
from .optimize import METHODS, calibrate
from .problem import CalibrationSetup
from .protocol import (
    FOLDS,
    gauge_scores,
    load_experiment,
    make_setup,
    run_protocol,
    summarize_bundle,
)
from .rasters import write_cell_map, write_discharge
from .synthetic import generate_synthetic, write_dataset

log = logging.getLogger("regiohydro")

CARRIED_SECTIONS = ("cost", "optimizer", "bayes", "bounds", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(parser, defaults):
    # SUPPRESS on subparsers so a flag given before the subcommand is kept
    d = None if defaults else argparse.SUPPRESS
    parser.add_argument("--config", type=Path, default=d, help="INI configuration file")
    parser.add_argument("--seed", type=int, default=d, help="override the configured seed")
    parser.add_argument("--threads", type=int, default=1 if defaults else d,
                        help="worker threads")
    parser.add_argument("--out-dir", type=Path, default=Path(".") if defaults else d,
                        help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=False if defaults else d)


def build_parser():
    parser = _Parser(prog="regiohydro", description="Distributed hydrological calibration")
    _global_flags(parser, True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, False)
        return p

    p = add("simulate", "run the forward model and write gauge discharge")
    p.add_argument("--control", type=Path, help="control JSON (default: bound midpoints)")
    p.add_argument("--theta", help="uniform parameters cp,cft,kexc,lr")
    p = add("gradcheck", "compare the adjoint gradient with finite differences")
    p.add_argument("--probes", type=int, help="probes per parameter")
    p = add("calibrate", "calibrate one method on one period")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--period", default="P1", choices=FOLDS)
    p = add("bayes-fg", "Bayesian first guess with the L-curve")
    p.add_argument("--period", default="P1", choices=FOLDS)
    add("synth", "generate a twin-experiment dataset")
    add("protocol", "run the split-sample method comparison")
    add("report", "print the score summary of a protocol bundle")
    return parser


def _config(args):
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.bayes_seed = args.seed
        cfg.optimizer.seed = args.seed
    if args.threads < 1:
        raise UserError("--threads must be >= 1")
    return cfg


def _require_config(args):
    if args.config is None:
        raise UserError(f"{args.command} needs --config")


def cmd_simulate(args, cfg):
    _require_config(args)
    exp = load_experiment(cfg)
    if args.control is not None and args.theta is not None:
        raise UserError("give --control or --theta, not both")
    if args.control is not None:
        if not args.control.is_file():
            raise UserError(f"control file not found: {args.control}")
        ctrl = loads_control(args.control.read_text())
    elif args.theta is not None:
        ctrl = UniformControl(np.array([float(v) for v in args.theta.split(",")]), cfg.bounds)
    else:
        ctrl = UniformControl(0.5 * (cfg.bounds.lower + cfg.bounds.upper), cfg.bounds)
    n = exp.forcing.n_steps
    setup = CalibrationSetup(exp.plan, exp.forcing, exp.gauges.select(exp.plan, exp.gauges.ids),
                             exp.descriptors, cfg.bounds, cfg.cost)
    params = setup.parameters(ctrl)
    q = setup.discharge(params)
    path = args.out_dir / "discharge.csv"
    write_discharge(path, setup.gauges.ids, q)
    print(f"simulated {n} steps at {len(setup.gauges.ids)} gauges -> {path}")


def _desk_params(plan, bounds, seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.25, 0.75, size=(len(PARAM_NAMES), plan.n_active))
    return ParameterFields(bounds.lower[:, None] + bounds.width[:, None] * u, bounds)


def cmd_gradcheck(args, cfg):
    if cfg.data:
        exp = load_experiment(cfg)
        plan, forcing = exp.plan, exp.forcing
        gauges = exp.gauges.select(plan, exp.donors or exp.gauges.ids)
    else:
        ds = generate_synthetic(cfg.synthetic, cfg.seed)
        plan, forcing = ds.plan, ds.forcing
        gauges = ds.gauges.select(plan, ds.donors)
    probes = args.probes or cfg.gradcheck["probes"]
    params = _desk_params(plan, cfg.bounds, cfg.seed)
    report = check_gradient_fd(plan, forcing, params, gauges, probes, seed=cfg.seed,
                               cfg=cfg.cost, step_fraction=cfg.gradcheck["step_fraction"])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "gradcheck.csv").write_text(report.to_csv())
    tol = cfg.gradcheck["tolerance"]
    ok = report.max_rel_error < tol
    print(f"max relative error {report.max_rel_error:.3e} over {len(report.rows)} probes "
          f"({len(report.rejected)} rejected): {'PASS' if ok else 'FAIL'} (tolerance {tol:g})")
    return 0 if ok else 1


def cmd_calibrate(args, cfg):
    _require_config(args)
    exp = load_experiment(cfg)
    setup = make_setup(exp, exp.donors, args.period, cfg)
    res = calibrate(args.method, setup, cfg.optimizer, cfg.bayes_size, cfg.bayes_seed,
                    args.threads)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.method}_{args.period}"
    if res.control is not None:
        (out / f"{stem}.json").write_text(dumps_control(res.control))
    (out / f"{stem}_report.csv").write_text(res.report.to_csv())
    for k, name in enumerate(PARAM_NAMES):
        write_cell_map(out / f"{stem}_{name}.asc", exp.plan, res.params.values[k])
    scores = gauge_scores(setup, res.params)
    print(f"{args.method} on {args.period}: J = {res.cost:.6g} "
          f"({res.report.stop_reason}, {res.report.iterations} iterations)")
    for gid, v in scores.items():
        print(f"  {gid} NSE {v:.4f}")


def cmd_bayes_fg(args, cfg):
    _require_config(args)
    exp = load_experiment(cfg)
    setup = make_setup(exp, exp.donors, args.period, cfg)
    ldb = bayes.ldb_first_guess(setup, cfg.bayes_size, cfg.bayes_seed, args.threads)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "ensemble.csv").write_text(ldb.sample.to_csv())
    (out / "lcurve.csv").write_text(ldb.lcurve.to_csv())
    (out / "first_guess.json").write_text(dumps_control(UniformControl(ldb.prior, cfg.bounds)))
    values = ", ".join(f"{n}={v:.6g}" for n, v in zip(PARAM_NAMES, ldb.prior))
    print(f"alpha* = {ldb.alpha}, first guess {values}")


def cmd_synth(args, cfg):
    ds = generate_synthetic(cfg.synthetic, cfg.seed)
    carried = {s: cfg.raw[s] for s in CARRIED_SECTIONS if s in cfg.raw}
    methods = cfg.methods if "methods" in cfg.raw.get("experiment", {}) else None
    path = write_dataset(ds, args.out_dir, cfg.seed, methods, carried)
    print(f"wrote twin dataset ({ds.plan.n_active} cells, {ds.forcing.n_steps} steps) -> {path}")


def cmd_protocol(args, cfg):
    _require_config(args)
    bundle = run_protocol(cfg, args.out_dir, args.threads)
    print(summarize_bundle(args.out_dir), end="")
    if bundle.partial:
        print(f"partial bundle: {len(bundle.manifest['failures'])} calibration(s) failed",
              file=sys.stderr)
        return 1


def cmd_report(args, cfg):
    print(summarize_bundle(args.out_dir), end="")


COMMANDS = {
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
    "calibrate": cmd_calibrate,
    "bayes-fg": cmd_bayes_fg,
    "synth": cmd_synth,
    "protocol": cmd_protocol,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        code = COMMANDS[args.command](args, cfg)
    except (HydroError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
