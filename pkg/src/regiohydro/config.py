"""INI experiment configuration with a fixed schema.

Every section and key is declared in :data:`SCHEMA`; anything else is a
:class:`ConfigError`, as are values that do not parse. Relative paths are
resolved against the directory holding the file.

Sections
--------
data
    ``drainage`` flow-direction raster, ``descriptors`` comma-separated
    rasters, ``forcing`` packed binary or ``prcp/``+``pet/`` directory,
    ``gauges`` registry CSV, ``observed`` discharge CSV, ``dt`` seconds
    (directory forcing only).
experiment
    ``methods``, ``donors``, ``ungauged`` (comma lists), ``p1``/``p2`` as
    ``start:stop`` timestep ranges, ``seed``.
cost, optimizer, bayes
    Numerical settings, see the defaults below.
bounds
    ``lower`` and ``upper`` as four comma-separated floats.
synthetic
    Twin-experiment domain settings.
gradcheck
    ``probes`` per parameter, ``step_fraction``, ``tolerance``.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import Bounds
from .objective import CostConfig
from .optimize import METHODS, OptimizerConfig
from .synthetic import DomainSpec


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _range(text):
    start, sep, stop = text.partition(":")
    if not sep:
        raise ValueError(f"expected start:stop, got {text!r}")
    return int(start), int(stop)


def _optional_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


SCHEMA = {
    "data": {"drainage": str, "descriptors": _names, "forcing": str, "gauges": str,
             "observed": str, "dt": float},
    "experiment": {"methods": _names, "donors": _names, "ungauged": _names,
                   "p1": _range, "p2": _range, "seed": int},
    "cost": {"gamma": float, "warmup_steps": _optional_int, "warmup_fraction": float,
             "reg_kind": str},
    "optimizer": {
        "max_iter": int, "cost_rel_tol": float, "grad_tol": float, "lbfgs_memory": int,
        "sbs_max_iter": int, "sbs_min_step": float, "adam_max_iter": int,
        "adam_lr": float, "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
        "mlp_hidden": _ints, "seed": int,
    },
    "bayes": {"size": int, "seed": int},
    "bounds": {"lower": _floats, "upper": _floats},
    "synthetic": {"nrows": int, "ncols": int, "cell_size": float, "n_gauges": int,
                  "n_donors": int, "n_desc": int, "n_steps": int, "dt": float,
                  "mapping": str, "noise_sigma": float, "truth_spread": _floats,
                  "smoothing": float, "min_gauge_cells": int,
                  "max_gauge_fraction": float},
    "gradcheck": {"probes": int, "step_fraction": float, "tolerance": float},
}

PATH_KEYS = ("drainage", "forcing", "gauges", "observed")


@dataclass
class ExperimentConfig:
    source: Path | None = None
    text: str = ""
    raw: dict = field(default_factory=dict)     # section -> {key: raw string}
    data: dict = field(default_factory=dict)
    methods: tuple = METHODS
    donors: tuple = ()
    ungauged: tuple = ()
    periods: dict = field(default_factory=dict)
    seed: int = 0
    cost: CostConfig = field(default_factory=CostConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    bayes_size: int = 512
    bayes_seed: int = 0
    bounds: Bounds = field(default_factory=Bounds.default)
    synthetic: DomainSpec = field(default_factory=DomainSpec)
    gradcheck: dict = field(default_factory=lambda: {"probes": 10, "step_fraction": 1e-4,
                                                     "tolerance": 1e-5})

    @property
    def digest(self):
        """SHA-256 of the configuration text."""
        return hashlib.sha256(self.text.encode()).hexdigest()

    def validate(self, n_steps=None):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        overlap = set(self.donors) & set(self.ungauged)
        if overlap:
            raise ConfigError(f"gauges both donor and pseudo-ungauged: {sorted(overlap)}")
        if self.periods:
            (a0, a1), (b0, b1) = self.periods["P1"], self.periods["P2"]
            if a0 >= a1 or b0 >= b1 or min(a0, b0) < 0:
                raise ConfigError("periods must be non-empty start:stop ranges")
            if a0 < b1 and b0 < a1:
                raise ConfigError("periods P1 and P2 overlap")
            if n_steps is not None and max(a1, b1) > n_steps:
                raise ConfigError(f"periods exceed the forcing length {n_steps}")
        return self


def _parse_section(parser, section):
    schema = SCHEMA[section]
    out = {}
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            out[key] = schema[key](raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    return out


def parse_config(text, base_dir=None, source=None):
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    unknown = [s for s in parser.sections() if s not in SCHEMA]
    if unknown:
        raise ConfigError(f"unknown sections {unknown}")
    sec = {s: _parse_section(parser, s) for s in parser.sections()}
    base = Path(base_dir) if base_dir is not None else Path(".")
    cfg = ExperimentConfig(source=source, text=text,
                           raw={s: dict(parser[s]) for s in parser.sections()})

    data = dict(sec.get("data", {}))
    for key in PATH_KEYS:
        if key in data:
            data[key] = base / data[key]
    if "descriptors" in data:
        data["descriptors"] = tuple(base / p for p in data["descriptors"])
    cfg.data = data

    exp = sec.get("experiment", {})
    cfg.methods = exp.get("methods", cfg.methods)
    cfg.donors = exp.get("donors", ())
    cfg.ungauged = exp.get("ungauged", ())
    if ("p1" in exp) != ("p2" in exp):
        raise ConfigError("give both p1 and p2 or neither")
    if "p1" in exp:
        cfg.periods = {"P1": exp["p1"], "P2": exp["p2"]}
    cfg.seed = exp.get("seed", 0)

    try:
        cfg.cost = CostConfig(**sec.get("cost", {}))
        cfg.optimizer = OptimizerConfig(**{"seed": cfg.seed, **sec.get("optimizer", {})})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bayes_sec = sec.get("bayes", {})
    cfg.bayes_size = bayes_sec.get("size", 512)
    cfg.bayes_seed = bayes_sec.get("seed", cfg.seed)

    bsec = sec.get("bounds", {})
    if bsec:
        default = Bounds.default()
        lower = np.array(bsec.get("lower", default.lower), dtype=np.float64)
        upper = np.array(bsec.get("upper", default.upper), dtype=np.float64)
        if lower.shape != (4,) or upper.shape != (4,) or np.any(lower >= upper):
            raise ConfigError("bounds need four values each with lower < upper")
        cfg.bounds = Bounds(lower, upper)

    syn = dict(sec.get("synthetic", {}))
    if "truth_spread" in syn and len(syn["truth_spread"]) not in (1, 4):
        raise ConfigError("truth_spread takes one or four values")
    cfg.synthetic = DomainSpec(**syn)
    cfg.gradcheck.update(sec.get("gradcheck", {}))
    return cfg.validate()


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    return parse_config(path.read_text(), path.parent, path)


def config_fields(section):
    """Keys accepted in ``section``, for documentation and error messages."""
    return tuple(SCHEMA[section])

