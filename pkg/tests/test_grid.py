import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regiohydro.errors import (
    ConstantDescriptor,
    CycleDetected,
    DanglingFlowDirection,
    InactiveCell,
    InvalidWeights,
)
from regiohydro.grid import (
    NODATA,
    DescriptorStack,
    DrainagePlan,
    Gauge,
    GaugeSet,
    delineate_catchment,
    normalize_descriptors,
    offset_to_code,
    topological_order,
)
from regiohydro.synthetic import random_drainage


def test_codes_run_clockwise_from_east():
    assert offset_to_code(0, 1) == 1
    assert offset_to_code(1, 1) == 2
    assert offset_to_code(1, 0) == 3
    assert offset_to_code(-1, 0) == 7
    assert offset_to_code(-1, 1) == 8


def test_chain_topology(chain_plan):
    assert topological_order(chain_plan) == [(0, 0), (0, 1), (0, 2)]
    assert list(chain_plan.downstream) == [1, 2, -1]
    assert list(chain_plan.accumulation()) == [1, 2, 3]
    assert list(chain_plan.outlets()) == [2]


def test_confluence_order_breaks_ties_by_index(y_plan):
    # (0,0)->(1,0), (0,1)->(1,0) via SW, (1,1)->(1,0)
    order = topological_order(y_plan)
    assert order[-1] == (1, 0)
    assert order[:3] == [(0, 0), (0, 1), (1, 1)]
    assert y_plan.accumulation()[y_plan.cell_index((1, 0))] == 4


def test_two_cell_cycle_is_rejected():
    with pytest.raises(CycleDetected):
        DrainagePlan(np.array([[1, 5]]))


def test_flow_off_the_grid_is_dangling():
    with pytest.raises(DanglingFlowDirection):
        DrainagePlan(np.array([[7, 0]]))


def test_flow_into_inactive_cell_is_dangling():
    with pytest.raises(DanglingFlowDirection):
        DrainagePlan(np.array([[1, NODATA, 0]]))


def test_nodata_cells_are_skipped():
    plan = DrainagePlan(np.array([[0, NODATA], [7, NODATA]]))
    assert plan.n_active == 2
    with pytest.raises(InactiveCell):
        plan.cell_index((0, 1))


def test_delineation_of_confluence(y_plan):
    mask = delineate_catchment(y_plan, (1, 0))
    assert mask.all()
    head = delineate_catchment(y_plan, (0, 0))
    assert head.sum() == 1 and head[0, 0]


def test_grid_round_trip(y_plan):
    values = np.arange(y_plan.n_active, dtype=float)
    assert np.array_equal(y_plan.from_grid(y_plan.to_grid(values)), values)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(0, 10_000))
def test_random_forests_drain_to_one_outlet(nrows, ncols, seed):
    plan = DrainagePlan(random_drainage(nrows, ncols, np.random.default_rng(seed)))
    order = plan.topo_order
    position = np.empty_like(order)
    position[order] = np.arange(order.size)
    down = plan.downstream
    linked = down >= 0
    assert np.all(position[linked] < position[down[linked]])
    assert plan.outlets().size == 1
    assert plan.accumulation()[plan.outlets()[0]] == plan.n_active


def test_normalization_is_min_max():
    raw = DescriptorStack(["a", "b"], np.array([[2.0, 4.0, 6.0], [-1.0, 0.0, 1.0]]))
    norm = normalize_descriptors(raw)
    assert np.allclose(norm.values, [[0.0, 0.5, 1.0], [0.0, 0.5, 1.0]])


def test_constant_descriptor_is_an_error():
    with pytest.raises(ConstantDescriptor):
        normalize_descriptors(DescriptorStack(["flat"], np.ones((1, 4))))


def test_gauge_weights_must_sum_to_one(chain_plan):
    with pytest.raises(InvalidWeights):
        GaugeSet.build(chain_plan, [Gauge("a", 0, 1, 0.3), Gauge("b", 0, 2, 0.3)])


def test_gauge_masks_and_ungauged(chain_plan):
    gs = GaugeSet.build(chain_plan, [Gauge("up", 0, 1, 0.5), Gauge("out", 0, 2, 0.5)])
    assert gs.upstream_masks.tolist() == [[True, True, False], [True, True, True]]
    assert not gs.ungauged_mask.any()
    sub = gs.select(chain_plan, ["up"])
    assert sub.weights.tolist() == [1.0]
