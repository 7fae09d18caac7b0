"""File formats: ESRI ASCII grids, gauge and discharge CSVs, forcing stacks."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidForcing, UserError
from .grid import NODATA, DescriptorStack, Gauge, GaugeSet
from .model import ForcingSeries

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")
FORCING_MAGIC = b"RHFORC01"
# magic, nrows, ncols, n_steps, dt
_FORCING_HEADER = struct.Struct("<8sqqqd")


@dataclass
class AsciiGrid:
    data: np.ndarray
    xllcorner: float = 0.0
    yllcorner: float = 0.0
    cellsize: float = 1000.0
    nodata: float = float(NODATA)

    @property
    def shape(self):
        return self.data.shape

    @property
    def mask(self):
        """True where the cell holds a value."""
        return ~(np.isnan(self.data) | (self.data == self.nodata))


def _fmt(v):
    return "%.17g" % v


def read_ascii_grid(path):
    path = Path(path)
    if not path.is_file():
        raise UserError(f"raster not found: {path}")
    with open(path) as fh:
        header = {}
        for _ in HEADER_KEYS:
            parts = fh.readline().split()
            if len(parts) != 2:
                raise UserError(f"{path}: malformed header line {parts!r}")
            header[parts[0].lower()] = float(parts[1])
        body = fh.read().split()
    missing = [k for k in HEADER_KEYS if k.lower() not in header]
    if missing:
        raise UserError(f"{path}: missing header keys {missing}")
    nrows, ncols = int(header["nrows"]), int(header["ncols"])
    if len(body) != nrows * ncols:
        raise DimensionMismatch(f"{path}: expected {nrows * ncols} values, found {len(body)}")
    data = np.array([float(v) for v in body], dtype=np.float64).reshape(nrows, ncols)
    return AsciiGrid(data, header["xllcorner"], header["yllcorner"], header["cellsize"],
                     header["nodata_value"])


def write_ascii_grid(path, grid):
    """Write with 17 significant digits so a read returns the same floats.
    NaN cells are written as the nodata value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.where(np.isnan(grid.data), grid.nodata, grid.data)
    nrows, ncols = data.shape
    lines = [
        f"ncols {ncols}",
        f"nrows {nrows}",
        f"xllcorner {_fmt(grid.xllcorner)}",
        f"yllcorner {_fmt(grid.yllcorner)}",
        f"cellsize {_fmt(grid.cellsize)}",
        f"NODATA_value {_fmt(grid.nodata)}",
    ]
    lines += [" ".join(_fmt(v) for v in row) for row in data]
    path.write_text("\n".join(lines) + "\n")


def write_cell_map(path, plan, values):
    """Write a per-active-cell vector as a raster on the plan's grid."""
    write_ascii_grid(path, AsciiGrid(plan.to_grid(values), plan.xllcorner, plan.yllcorner,
                                     plan.cell_size))


def read_flow_dir(path):
    """Flow-direction raster as (int codes, active mask)."""
    grid = read_ascii_grid(path)
    active = grid.mask
    codes = np.where(active, grid.data, NODATA).astype(np.int64)
    return codes, active, grid


def read_descriptors(paths, plan, names=None):
    maps = []
    for p in paths:
        grid = read_ascii_grid(p)
        if grid.shape != plan.shape:
            raise DimensionMismatch(f"{p}: shape {grid.shape} differs from grid {plan.shape}")
        values = plan.from_grid(grid.data)
        if not grid.mask[plan.rows, plan.cols].all():
            raise UserError(f"{p}: nodata inside the active domain")
        maps.append(values)
    names = list(names) if names is not None else [Path(p).stem for p in paths]
    return DescriptorStack(names, np.array(maps))


def read_gauges(path):
    """Gauge registry ``gauge_id,row,col,weight``, sorted by id."""
    path = Path(path)
    if not path.is_file():
        raise UserError(f"gauge file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"gauge_id", "row", "col", "weight"}:
            raise UserError(f"{path}: expected columns gauge_id,row,col,weight")
        rows = [Gauge(r["gauge_id"], int(r["row"]), int(r["col"]), float(r["weight"]))
                for r in reader]
    return sorted(rows, key=lambda g: g.gauge_id)


def write_gauges(path, gauges):
    lines = ["gauge_id,row,col,weight"]
    lines += [f"{g.gauge_id},{g.row},{g.col},{g.weight!r}" for g in gauges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_discharge(path):
    """``time,gauge_id,q_m3s`` to a dict of gauge id -> series ordered by time."""
    path = Path(path)
    if not path.is_file():
        raise UserError(f"discharge file not found: {path}")
    series = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            series.setdefault(r["gauge_id"], []).append((int(r["time"]), float(r["q_m3s"])))
    out = {}
    for gid, pts in series.items():
        pts.sort()
        times = [t for t, _ in pts]
        if times != list(range(len(times))):
            raise UserError(f"{path}: gauge {gid} has gaps or duplicate times")
        out[gid] = np.array([q for _, q in pts])
    return out


def write_discharge(path, gauge_ids, q):
    """``q`` is (N_G, n_t); rows are written time-major."""
    q = np.asarray(q)
    lines = ["time,gauge_id,q_m3s"]
    for t in range(q.shape[1]):
        for g, gid in enumerate(gauge_ids):
            lines.append(f"{t},{gid},{float(q[g, t])!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def attach_observed(plan, gauges, observed):
    """GaugeSet from registry rows plus observed series keyed by id."""
    missing = [g.gauge_id for g in gauges if g.gauge_id not in observed]
    if missing:
        raise UserError(f"no observed discharge for gauges {missing}")
    return GaugeSet.build(plan, [Gauge(g.gauge_id, g.row, g.col, g.weight, observed[g.gauge_id])
                                 for g in gauges], check_weights=False)


def write_forcing_bin(path, plan, forcing):
    """Packed forcing: header (magic, nrows, ncols, n_steps, dt) then the
    precipitation and PET grids, each (n_steps, nrows, ncols) little-endian
    float64 with NaN outside the domain."""
    n_t = forcing.n_steps
    with open(path, "wb") as fh:
        fh.write(_FORCING_HEADER.pack(FORCING_MAGIC, plan.nrows, plan.ncols, n_t, forcing.dt))
        for series in (forcing.precip, forcing.pet):
            block = np.full((n_t, plan.nrows, plan.ncols), np.nan)
            block[:, plan.rows, plan.cols] = series
            fh.write(block.astype("<f8").tobytes())


def read_forcing_bin(path, plan):
    path = Path(path)
    if not path.is_file():
        raise UserError(f"forcing file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _FORCING_HEADER.size:
        raise InvalidForcing(f"{path}: truncated header")
    magic, nrows, ncols, n_t, dt = _FORCING_HEADER.unpack_from(raw)
    if magic != FORCING_MAGIC:
        raise InvalidForcing(f"{path}: bad magic {magic!r}")
    if (nrows, ncols) != plan.shape:
        raise DimensionMismatch(f"{path}: forcing grid {(nrows, ncols)} vs domain {plan.shape}")
    values = np.frombuffer(raw, dtype="<f8", offset=_FORCING_HEADER.size)
    if values.size != 2 * n_t * nrows * ncols:
        raise InvalidForcing(f"{path}: expected {2 * n_t * nrows * ncols} values, got {values.size}")
    values = values.reshape(2, n_t, nrows, ncols)
    return ForcingSeries(values[0][:, plan.rows, plan.cols].copy(),
                         values[1][:, plan.rows, plan.cols].copy(), float(dt))


def write_forcing_dir(root, plan, forcing):
    root = Path(root)
    for name, series in (("prcp", forcing.precip), ("pet", forcing.pet)):
        for t in range(forcing.n_steps):
            write_cell_map(root / name / f"{t}.asc", plan, series[t])


def read_forcing_dir(root, plan, dt=3600.0):
    root = Path(root)
    stacks = []
    for name in ("prcp", "pet"):
        folder = root / name
        if not folder.is_dir():
            raise UserError(f"forcing directory not found: {folder}")
        files = sorted(folder.glob("*.asc"), key=lambda p: int(p.stem))
        if [int(p.stem) for p in files] != list(range(len(files))):
            raise InvalidForcing(f"{folder}: timesteps must be numbered 0..N_T-1")
        stacks.append(np.array([plan.from_grid(read_ascii_grid(p).data) for p in files]))
    if stacks[0].shape != stacks[1].shape:
        raise DimensionMismatch("prcp and pet have different lengths")
    return ForcingSeries(stacks[0], stacks[1], dt)


def read_forcing(path, plan, dt=3600.0):
    path = Path(path)
    if path.is_dir():
        return read_forcing_dir(path, plan, dt)
    return read_forcing_bin(path, plan)
