from __future__ import annotations

import numpy as np
import pytest

from sketchfuse.grid import (
    YZ_MAX,
    GridError,
    LogicalGrid,
    TileConfig,
    default_tile,
    delinearize,
    iter_blocks,
    linearize,
    tile_ranges,
    trip_count,
)


def test_default_tile_policy():
    assert default_tile(64) == 64
    assert default_tile(4096) == 64 and trip_count(4096, 64) == 64
    assert default_tile(1) == 1 and trip_count(1, 1) == 1


def test_tile_overrides():
    t = TileConfig({"N": 128})
    assert t.tile("N", 4096) == 128 and t.trip("N", 4096) == 32
    assert t.tile("M", 512) == 64
    with pytest.raises(GridError):
        TileConfig({"N": 0})


def test_ragged_tile_ranges():
    assert tile_ranges(10, 4) == [(0, 4), (4, 8), (8, 10)]


def test_linearize_examples():
    g = LogicalGrid.of((3, 4))
    assert linearize(g, (0, 0)) == 0
    assert linearize(g, (2, 3)) == 11
    assert delinearize(g, 11) == (2, 3)
    assert linearize(LogicalGrid.of((2, 3, 5)), (1, 2, 4)) == 29


def test_small_grid_round_trip():
    g = LogicalGrid.of((7, 9))
    assert [bid for bid, c in iter_blocks(g) if linearize(g, c) == bid] == list(range(63))


def test_long_axis_needs_flattening():
    g = LogicalGrid.of((70000,))
    assert g.needs_flattening and 70000 > YZ_MAX
    assert delinearize(g, 69999) == (69999,)


def test_out_of_range():
    g = LogicalGrid.of((3, 4))
    with pytest.raises(GridError):
        linearize(g, (3, 0))
    with pytest.raises(GridError):
        delinearize(g, 12)
    with pytest.raises(GridError):
        linearize(g, (1,))
    with pytest.raises(GridError):
        LogicalGrid.of((0, 2))
    with pytest.raises(GridError):
        LogicalGrid.of((2**16, 2**16))


def test_vectorised_ids():
    g = LogicalGrid.of((4, 5, 6))
    ids = np.arange(g.total)
    np.testing.assert_array_equal(linearize(g, delinearize(g, ids)), ids)
