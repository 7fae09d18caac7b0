"""Synthetic twin experiments: random drainage, descriptors, forcing and a
known descriptor-to-parameter mapping that produces the observations."""
from __future__ import annotations

import configparser
import heapq
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .adjoint import gauge_discharge
from .errors import SpecInvalid
from .grid import (
    D8_OFFSETS,
    OUTLET,
    DescriptorStack,
    DrainagePlan,
    Gauge,
    GaugeSet,
    normalize_descriptors,
    offset_to_code,
)
from .mapping import (
    MlpControl,
    RegressionControl,
    SigmoidScaler,
    apply_control,
    dumps_control,
)
from .model import PARAM_NAMES, Bounds, ForcingSeries
from .rasters import write_cell_map, write_discharge, write_forcing_bin, write_gauges

DESCRIPTOR_NAMES = (
    "slope", "drainage_density", "karst_index", "woodland", "urban",
    "soil_storage", "soil_moisture",
)


@dataclass
class DomainSpec:
    nrows: int = 20
    ncols: int = 20
    cell_size: float = 1000.0
    n_gauges: int = 8
    n_donors: int = 5
    n_desc: int = 7
    n_steps: int = 2880
    dt: float = 3600.0
    mapping: str = "multilinear"
    noise_sigma: float = 0.0
    min_gauge_cells: int = 6
    max_gauge_fraction: float = 0.5
    truth_center: tuple = (300.0, 120.0, -1.0, 80.0)
    truth_spread: tuple = (0.6, 0.6, 0.15, 0.6)
    smoothing: float = 2.0

    def validate(self):
        if self.nrows < 2 or self.ncols < 2:
            raise SpecInvalid("grid must be at least 2x2")
        if self.n_gauges < 2 or not 1 <= self.n_donors < self.n_gauges:
            raise SpecInvalid("need >= 1 donor and >= 1 pseudo-ungauged gauge")
        if self.n_desc < 1:
            raise SpecInvalid("need at least one descriptor")
        if self.n_steps < 4 or self.n_steps % 2:
            raise SpecInvalid("n_steps must be even and >= 4 (two equal periods)")
        if self.mapping not in ("multilinear", "mlp"):
            raise SpecInvalid(f"unknown mapping kind {self.mapping!r}")
        if self.noise_sigma < 0:
            raise SpecInvalid("noise sigma must be >= 0")


@dataclass
class SyntheticTruth:
    kind: str
    control: object
    params: object
    noise_sigma: float = 0.0


@dataclass
class SyntheticDataset:
    plan: DrainagePlan
    descriptors: DescriptorStack
    forcing: ForcingSeries
    gauges: GaugeSet
    truth: SyntheticTruth
    donors: list
    ungauged: list
    periods: dict = field(default_factory=dict)
    bounds: Bounds = field(default_factory=Bounds.default)


def random_drainage(nrows, ncols, rng, smoothing=2.0):
    """D8 forest draining to one border outlet, grown by priority flood over
    a random smooth surface tilted toward the outlet."""
    rough = gaussian_filter(rng.standard_normal((nrows, ncols)), smoothing, mode="nearest")
    rough /= max(np.abs(rough).max(), 1e-12)
    border = [(r, c) for r in range(nrows) for c in range(ncols)
              if r in (0, nrows - 1) or c in (0, ncols - 1)]
    outlet = border[int(rng.integers(len(border)))]
    rr, cc = np.mgrid[0:nrows, 0:ncols]
    dist = np.hypot(rr - outlet[0], cc - outlet[1])
    elev = dist / max(nrows, ncols) + 0.5 * rough
    flow_dir = np.full((nrows, ncols), -1, dtype=np.int64)
    flow_dir[outlet] = OUTLET
    seen = np.zeros((nrows, ncols), dtype=bool)
    seen[outlet] = True
    heap = [(elev[outlet], outlet[0] * ncols + outlet[1])]
    while heap:
        level, idx = heapq.heappop(heap)
        r, c = divmod(idx, ncols)
        for dr, dc in D8_OFFSETS.values():
            nr, nc = r + dr, c + dc
            if 0 <= nr < nrows and 0 <= nc < ncols and not seen[nr, nc]:
                seen[nr, nc] = True
                flow_dir[nr, nc] = offset_to_code(-dr, -dc)
                heapq.heappush(heap, (max(elev[nr, nc], level), nr * ncols + nc))
    return flow_dir


def random_descriptors(plan, n_desc, rng, smoothing=2.0):
    maps = []
    for _ in range(n_desc):
        field_ = gaussian_filter(rng.standard_normal(plan.shape), smoothing, mode="nearest")
        maps.append(plan.from_grid(field_))
    names = [DESCRIPTOR_NAMES[d] if d < len(DESCRIPTOR_NAMES) else f"desc{d + 1}"
             for d in range(n_desc)]
    return normalize_descriptors(DescriptorStack(names, np.array(maps)))


def random_forcing(plan, n_steps, rng, dt=3600.0, smoothing=2.0):
    """Rain as random storm pulses over smooth multiplier fields, PET as a
    diurnal cycle (both mm per timestep)."""
    n = plan.n_active
    precip = np.zeros((n_steps, n))
    hours_per_step = dt / 3600.0
    t = 0
    while t < n_steps:
        t += int(rng.exponential(60.0 / hours_per_step)) + 1
        if t >= n_steps:
            break
        duration = int(rng.integers(3, 19))
        intensity = rng.uniform(0.5, 6.0) * hours_per_step
        pattern = gaussian_filter(rng.standard_normal(plan.shape), smoothing, mode="nearest")
        pattern = plan.from_grid(pattern)
        pattern = 1.0 + 0.5 * pattern / max(np.abs(pattern).max(), 1e-12)
        shape = np.sin(np.pi * (np.arange(duration) + 0.5) / duration)
        for k in range(duration):
            if t + k < n_steps:
                precip[t + k] += intensity * shape[k] * pattern
        t += duration
    hours = (np.arange(n_steps) * hours_per_step) % 24.0
    diurnal = 0.25 * hours_per_step * np.maximum(np.sin(2.0 * np.pi * (hours - 6.0) / 24.0), 0.0)
    pet = np.repeat(diurnal[:, None], n, axis=1)
    return ForcingSeries(precip, pet, dt)


def truth_control(kind, n_desc, rng, bounds, center, spread):
    center = np.asarray(center, dtype=np.float64)
    spread = np.broadcast_to(np.asarray(spread, dtype=np.float64), (4,))
    base = SigmoidScaler(bounds).inverse(center)
    if kind == "multilinear":
        coef = rng.normal(0.0, 1.0, size=(4, n_desc)) * spread[:, None]
        return RegressionControl(base - 0.5 * coef.sum(axis=1), coef, bounds)
    mlp = MlpControl.initialize(n_desc, (8,), int(rng.integers(2**31)), bounds)
    mlp.weights[-1] *= spread[:, None]
    hidden = np.tanh(mlp.biases[0])
    mlp.biases[-1] = base - mlp.weights[-1] @ hidden
    return mlp


def pick_gauges(plan, n_gauges, rng, min_cells, max_fraction):
    acc = plan.accumulation()
    upper = max_fraction * plan.n_active
    candidates = np.flatnonzero((acc >= min_cells) & (acc <= upper) & (plan.downstream >= 0))
    if candidates.size < n_gauges:
        raise SpecInvalid(
            f"only {candidates.size} cells qualify as gauges, {n_gauges} requested"
        )
    return np.sort(rng.choice(candidates, size=n_gauges, replace=False))


def generate_synthetic(spec=None, seed=0):
    """Build a full twin setup deterministically from ``seed``."""
    spec = spec or DomainSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    bounds = Bounds.default()
    plan = DrainagePlan(random_drainage(spec.nrows, spec.ncols, rng, spec.smoothing),
                        spec.cell_size)
    descriptors = random_descriptors(plan, spec.n_desc, rng, spec.smoothing)
    forcing = random_forcing(plan, spec.n_steps, rng, spec.dt, spec.smoothing)
    control = truth_control(spec.mapping, spec.n_desc, rng, bounds,
                            spec.truth_center, spec.truth_spread)
    params = apply_control(control, descriptors)
    cells = pick_gauges(plan, spec.n_gauges, rng, spec.min_gauge_cells,
                        spec.max_gauge_fraction)
    ids = [f"G{k + 1:02d}" for k in range(cells.size)]
    bare = GaugeSet.build(plan, [Gauge(gid, *plan.cell_coord(c), 1.0 / cells.size)
                                 for gid, c in zip(ids, cells)])
    q = gauge_discharge(plan, forcing, params, bare)[0].T
    if spec.noise_sigma > 0:
        q = q * np.exp(spec.noise_sigma * rng.standard_normal(q.shape))
    gauges = GaugeSet.build(plan, [Gauge(g.gauge_id, g.row, g.col, g.weight, q[k])
                                   for k, g in enumerate(bare.gauges)])
    order = rng.permutation(len(ids))
    donors = sorted(ids[k] for k in order[:spec.n_donors])
    ungauged = sorted(ids[k] for k in order[spec.n_donors:])
    half = spec.n_steps // 2
    truth = SyntheticTruth(spec.mapping, control, params, spec.noise_sigma)
    return SyntheticDataset(plan, descriptors, forcing, gauges, truth, donors, ungauged,
                            {"P1": (0, half), "P2": (half, spec.n_steps)}, bounds)


def write_dataset(ds, out_dir, seed=0, methods=None, extra_sections=None):
    """Write a twin dataset as files plus a ready-to-run ``protocol.ini``.

    Layout: ``flowdir.asc``, ``descriptors/<name>.asc``, ``forcing.bin``,
    ``gauges.csv``, ``observed.csv``, ``truth/<param>.asc`` and
    ``truth/control.json``. ``extra_sections`` maps section name to a dict
    of raw option strings copied into the config (optimizer settings and
    the like).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = ds.plan
    write_cell_map(out / "flowdir.asc", plan, plan.flow_dir[plan.rows, plan.cols])
    desc_paths = []
    for name, values in zip(ds.descriptors.names, ds.descriptors.values):
        path = Path("descriptors") / f"{name}.asc"
        write_cell_map(out / path, plan, values)
        desc_paths.append(path.as_posix())
    write_forcing_bin(out / "forcing.bin", plan, ds.forcing)
    gauges = ds.gauges.gauges
    write_gauges(out / "gauges.csv", gauges)
    write_discharge(out / "observed.csv", ds.gauges.ids, ds.gauges.observed())
    for k, name in enumerate(PARAM_NAMES):
        write_cell_map(out / "truth" / f"{name}.asc", plan, ds.truth.params.values[k])
    (out / "truth" / "control.json").write_text(dumps_control(ds.truth.control))

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    (a0, a1), (b0, b1) = ds.periods["P1"], ds.periods["P2"]
    parser["data"] = {
        "drainage": "flowdir.asc",
        "descriptors": ", ".join(desc_paths),
        "forcing": "forcing.bin",
        "gauges": "gauges.csv",
        "observed": "observed.csv",
    }
    experiment = {
        "donors": ", ".join(ds.donors),
        "ungauged": ", ".join(ds.ungauged),
        "p1": f"{a0}:{a1}",
        "p2": f"{b0}:{b1}",
        "seed": str(seed),
    }
    if methods:
        experiment = {"methods": ", ".join(methods), **experiment}
    parser["experiment"] = experiment
    for name, options in (extra_sections or {}).items():
        parser[name] = dict(options)
    buf = io.StringIO()
    parser.write(buf)
    path = out / "protocol.ini"
    path.write_text(buf.getvalue())
    return path
