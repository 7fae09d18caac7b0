"""Spatial domain: D8 drainage plan, descriptor maps and gauge geometry.

Active cells are addressed by a compact index ``0..n_active-1`` assigned in
row-major order. Every per-cell array in the toolkit (parameters, states,
descriptors, gradients) uses that compact index; ``DrainagePlan.to_grid``
and ``DrainagePlan.from_grid`` convert to and from full rasters.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConstantDescriptor,
    CycleDetected,
    DanglingFlowDirection,
    DimensionMismatch,
    InactiveCell,
    InvalidWeights,
)

OUTLET = 0
NODATA = -9999

# D8 codes 1..8 clockwise from East; rows grow southward.
D8_OFFSETS = {
    1: (0, 1),
    2: (1, 1),
    3: (1, 0),
    4: (1, -1),
    5: (0, -1),
    6: (-1, -1),
    7: (-1, 0),
    8: (-1, 1),
}


def offset_to_code(drow, dcol):
    for code, off in D8_OFFSETS.items():
        if off == (drow, dcol):
            return code
    raise ValueError(f"({drow}, {dcol}) is not a D8 neighbour offset")


def _link_cells(flow_dir, active):
    """Return (cell_index grid, downstream index per active cell)."""
    nrows, ncols = flow_dir.shape
    index = np.full((nrows, ncols), -1, dtype=np.int64)
    rows, cols = np.nonzero(active)
    index[rows, cols] = np.arange(rows.size)
    downstream = np.full(rows.size, -1, dtype=np.int64)
    for i, (r, c) in enumerate(zip(rows, cols)):
        code = int(flow_dir[r, c])
        if code == OUTLET:
            continue
        if code not in D8_OFFSETS:
            raise DanglingFlowDirection((int(r), int(c)), f"invalid D8 code {code}")
        dr, dc = D8_OFFSETS[code]
        rr, cc = r + dr, c + dc
        if not (0 <= rr < nrows and 0 <= cc < ncols):
            raise DanglingFlowDirection((int(r), int(c)), "flow direction points off-grid")
        if not active[rr, cc]:
            raise DanglingFlowDirection(
                (int(r), int(c)), "flow direction points into an inactive cell"
            )
        downstream[i] = index[rr, cc]
    return index, downstream


def _kahn_order(downstream):
    n = downstream.size
    indegree = np.zeros(n, dtype=np.int64)
    for d in downstream:
        if d >= 0:
            indegree[d] += 1
    ready = [i for i in range(n) if indegree[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        d = downstream[i]
        if d >= 0:
            indegree[d] -= 1
            if indegree[d] == 0:
                heapq.heappush(ready, int(d))
    if len(order) < n:
        seen = np.zeros(n, dtype=bool)
        seen[order] = True
        # a leftover cell drains into a cycle; walking downstream must hit it
        cell = int(np.flatnonzero(~seen)[0])
        visited = set()
        while cell not in visited:
            visited.add(cell)
            cell = int(downstream[cell])
        return None, cell
    return np.asarray(order, dtype=np.int64), None


class DrainagePlan:
    """D8 flow-direction grid with derived topology.

    Parameters
    ----------
    flow_dir : (nrows, ncols) int array
        D8 codes 1..8, ``OUTLET`` (0) for outlets, ``NODATA`` for cells
        outside the domain.
    cell_size : float
        Cell edge length in metres.
    active_mask : optional bool array
        Defaults to ``flow_dir != NODATA``.
    """

    def __init__(self, flow_dir, cell_size=1000.0, active_mask=None,
                 xllcorner=0.0, yllcorner=0.0):
        flow_dir = np.asarray(flow_dir, dtype=np.int64)
        if flow_dir.ndim != 2:
            raise DimensionMismatch("flow_dir must be a 2-D grid")
        if active_mask is None:
            active_mask = flow_dir != NODATA
        active_mask = np.asarray(active_mask, dtype=bool)
        if active_mask.shape != flow_dir.shape:
            raise DimensionMismatch("active_mask and flow_dir differ in shape")
        if not active_mask.any():
            raise DimensionMismatch("drainage plan has no active cell")
        self.flow_dir = flow_dir
        self.flow_dir.setflags(write=False)
        self.active_mask = active_mask
        self.active_mask.setflags(write=False)
        self.cell_size = float(cell_size)
        self.xllcorner = float(xllcorner)
        self.yllcorner = float(yllcorner)
        self.index, self.downstream = _link_cells(flow_dir, active_mask)
        rows, cols = np.nonzero(active_mask)
        self.rows = rows
        self.cols = cols
        order, cycle_cell = _kahn_order(self.downstream)
        if order is None:
            raise CycleDetected((int(rows[cycle_cell]), int(cols[cycle_cell])))
        self.topo_order = order
        for arr in (self.index, self.downstream, self.rows, self.cols, self.topo_order):
            arr.setflags(write=False)

    @property
    def nrows(self):
        return self.flow_dir.shape[0]

    @property
    def ncols(self):
        return self.flow_dir.shape[1]

    @property
    def shape(self):
        return self.flow_dir.shape

    @property
    def n_active(self):
        return self.rows.size

    @property
    def cell_area(self):
        """Cell area in m²."""
        return self.cell_size * self.cell_size

    def cell_index(self, cell):
        r, c = cell
        if not (0 <= r < self.nrows and 0 <= c < self.ncols) or self.index[r, c] < 0:
            raise InactiveCell(f"cell {tuple(cell)} is not an active cell")
        return int(self.index[r, c])

    def cell_coord(self, i):
        return int(self.rows[i]), int(self.cols[i])

    def to_grid(self, values, fill=np.nan):
        values = np.asarray(values)
        grid = np.full(self.shape, fill, dtype=np.result_type(values, type(fill)))
        grid[self.rows, self.cols] = values
        return grid

    def from_grid(self, grid):
        grid = np.asarray(grid)
        if grid.shape[-2:] != self.shape:
            raise DimensionMismatch(
                f"grid shape {grid.shape[-2:]} does not match plan shape {self.shape}"
            )
        return grid[..., self.rows, self.cols]

    def outlets(self):
        return np.flatnonzero(self.downstream < 0)

    def upstream_mask(self, i):
        """Boolean vector over active cells draining through compact index ``i``."""
        mask = np.zeros(self.n_active, dtype=bool)
        mask[i] = True
        down = self.downstream
        for j in self.topo_order[::-1]:
            d = down[j]
            if d >= 0 and mask[d]:
                mask[j] = True
        return mask

    def accumulation(self):
        """Number of cells draining through each active cell (itself included)."""
        acc = np.ones(self.n_active, dtype=np.int64)
        for j in self.topo_order:
            d = self.downstream[j]
            if d >= 0:
                acc[d] += acc[j]
        return acc

    def levels(self):
        """Longest upstream path length per cell (headwaters are level 0)."""
        lev = np.zeros(self.n_active, dtype=np.int64)
        for j in self.topo_order:
            d = self.downstream[j]
            if d >= 0:
                lev[d] = max(lev[d], lev[j] + 1)
        return lev


def topological_order(plan):
    """Active cells as (row, col), upstream before downstream.

    Ties are broken by row-major cell index, so the result is deterministic.
    """
    return [plan.cell_coord(i) for i in plan.topo_order]


def delineate_catchment(plan, cell):
    """Boolean grid of the cells whose flow path passes through ``cell``."""
    i = plan.cell_index(cell)
    return plan.to_grid(plan.upstream_mask(i), fill=False).astype(bool)


@dataclass
class DescriptorStack:
    """Physical descriptor maps over the active cells.

    ``values`` has shape (n_desc, n_active). ``normalization`` holds the raw
    (min, max) per descriptor once :func:`normalize_descriptors` was applied.
    """

    names: list
    values: np.ndarray
    normalization: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if len(self.names) != self.values.shape[0]:
            raise DimensionMismatch(
                f"{len(self.names)} names for {self.values.shape[0]} descriptor maps"
            )
        if not np.all(np.isfinite(self.values)):
            raise DimensionMismatch("descriptor maps must be finite on every active cell")

    @property
    def n_desc(self):
        return self.values.shape[0]

    @property
    def n_cells(self):
        return self.values.shape[1]

    def subset(self, cells):
        return DescriptorStack(list(self.names), self.values[:, cells], self.normalization)


def normalize_descriptors(raw):
    """Global min-max rescale of each descriptor to [0, 1]."""
    lo = raw.values.min(axis=1)
    hi = raw.values.max(axis=1)
    flat = np.flatnonzero(hi <= lo)
    if flat.size:
        raise ConstantDescriptor(
            f"descriptor {raw.names[flat[0]]!r} is constant over the domain "
            "and would be collinear with the intercept"
        )
    scaled = (raw.values - lo[:, None]) / (hi - lo)[:, None]
    np.clip(scaled, 0.0, 1.0, out=scaled)
    return DescriptorStack(list(raw.names), scaled, np.column_stack([lo, hi]))


@dataclass
class Gauge:
    gauge_id: str
    row: int
    col: int
    weight: float
    observed: np.ndarray | None = None


@dataclass
class GaugeSet:
    gauges: list
    cells: np.ndarray = field(repr=False)
    upstream_masks: np.ndarray = field(repr=False)
    ungauged_mask: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, plan, gauges, check_weights=True):
        gauges = list(gauges)
        if not gauges:
            raise InvalidWeights("a gauge set needs at least one gauge")
        ids = [g.gauge_id for g in gauges]
        if len(set(ids)) != len(ids):
            raise InvalidWeights(f"duplicate gauge ids in {ids}")
        cells = np.array([plan.cell_index((g.row, g.col)) for g in gauges], dtype=np.int64)
        if check_weights:
            total = sum(g.weight for g in gauges)
            if abs(total - 1.0) > 1e-12:
                raise InvalidWeights(f"gauge weights sum to {total!r}, expected 1")
        masks = np.array([plan.upstream_mask(c) for c in cells])
        ungauged = ~masks.any(axis=0)
        return cls(gauges, cells, masks, ungauged)

    @property
    def n_gauges(self):
        return len(self.gauges)

    @property
    def ids(self):
        return [g.gauge_id for g in self.gauges]

    @property
    def weights(self):
        return np.array([g.weight for g in self.gauges], dtype=np.float64)

    def observed(self):
        """(n_gauges, n_t) array of observations."""
        return np.array([g.observed for g in self.gauges], dtype=np.float64)

    def select(self, plan, ids, t0=None, t1=None):
        """Sub-set of gauges with uniform weights and optionally sliced series."""
        by_id = {g.gauge_id: g for g in self.gauges}
        chosen = []
        for gid in ids:
            g = by_id[gid]
            obs = None if g.observed is None else g.observed[t0:t1]
            chosen.append(Gauge(g.gauge_id, g.row, g.col, 1.0 / len(ids), obs))
        return GaugeSet.build(plan, chosen)
