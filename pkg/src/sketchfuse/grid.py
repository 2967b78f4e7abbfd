"""Logical tiling: per-dim tile sizes, tile grids and their linearisation.

A kernel's tile grid may have any number of axes, but it is always launched
on a single physical axis.  Block ids are the row-major mixed-radix encoding
of the tile coordinates (outermost axis first), and the inverse map recovers
the coordinates inside the block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

X_MAX = 2**31 - 1
YZ_MAX = 65535
DEFAULT_TILE = 64
FULL_TILE_LIMIT = 128


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridLimits:
    x_max: int = X_MAX
    yz_max: int = YZ_MAX


LIMITS = GridLimits()


@dataclass(frozen=True)
class TileConfig:
    """Tile size per dim name; dims without an entry fall back to ``policy``."""

    sizes: Mapping[str, int] = field(default_factory=dict)
    policy: str = "default"

    def __post_init__(self) -> None:
        sizes = dict(self.sizes)
        for dim, size in sizes.items():
            if int(size) < 1:
                raise GridError(f"tile size for {dim!r} must be >= 1, got {size}")
        object.__setattr__(self, "sizes", sizes)

    def tile(self, dim: str, extent: int) -> int:
        if dim in self.sizes:
            return int(self.sizes[dim])
        return default_tile(extent)

    def trip(self, dim: str, extent: int) -> int:
        return trip_count(extent, self.tile(dim, extent))

    def merged(self, overrides: Mapping[str, int]) -> "TileConfig":
        return TileConfig({**self.sizes, **overrides}, self.policy)


def default_tile(extent: int) -> int:
    """Small dims are covered by one tile so they drop out of the tile loop."""
    return extent if extent <= FULL_TILE_LIMIT else DEFAULT_TILE


def trip_count(extent: int, tile: int) -> int:
    return -(-extent // tile)


def default_tiles(sketch) -> TileConfig:
    """Default tile sizes for every dim of a computation sketch."""
    return TileConfig({name: default_tile(extent) for name, extent in (*sketch.p_dims, *sketch.r_dims)})


def tile_ranges(extent: int, tile: int) -> list[tuple[int, int]]:
    return [(s, min(s + tile, extent)) for s in range(0, extent, tile)]


@dataclass(frozen=True)
class LogicalGrid:
    axes: tuple[tuple[str, int], ...]
    limits: GridLimits = LIMITS

    def __post_init__(self) -> None:
        axes = tuple((str(n), int(t)) for n, t in self.axes)
        for name, trips in axes:
            if trips < 1:
                raise GridError(f"axis {name!r} has trip count {trips} < 1")
        object.__setattr__(self, "axes", axes)
        if self.total > self.limits.x_max:
            raise GridError(f"grid of {self.total} blocks exceeds the physical limit {self.limits.x_max}")

    @classmethod
    def of(cls, trips: Sequence[int], names: Sequence[str] | None = None) -> "LogicalGrid":
        names = names or [f"a{i}" for i in range(len(trips))]
        return cls(tuple(zip(names, trips)))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(t for _, t in self.axes)

    @property
    def total(self) -> int:
        return math.prod(self.shape)

    @property
    def needs_flattening(self) -> bool:
        """True when some axis would not fit a secondary physical grid axis."""
        return any(t > self.limits.yz_max for t in self.shape)

    def strides(self) -> tuple[int, ...]:
        out = []
        acc = 1
        for t in reversed(self.shape):
            out.append(acc)
            acc *= t
        return tuple(reversed(out))


def linearize(grid: LogicalGrid, coords):
    """Row-major mixed-radix block id.  Accepts scalars or integer arrays per axis."""
    if len(coords) != len(grid.axes):
        raise GridError(f"expected {len(grid.axes)} coordinates, got {len(coords)}")
    lin = 0
    for (name, trips), c in zip(grid.axes, coords):
        c_arr = np.asarray(c)
        if np.any(c_arr < 0) or np.any(c_arr >= trips):
            raise GridError(f"coordinate for axis {name!r} out of range [0, {trips})")
        lin = lin * trips + c
    return lin


def delinearize(grid: LogicalGrid, block_id):
    """Inverse of :func:`linearize`."""
    ids = np.asarray(block_id)
    if np.any(ids < 0) or np.any(ids >= grid.total):
        raise GridError(f"block id out of range [0, {grid.total})")
    rest = block_id
    coords = []
    for _, trips in reversed(grid.axes):
        coords.append(rest % trips)
        rest = rest // trips
    return tuple(reversed(coords))


def iter_blocks(grid: LogicalGrid) -> Iterable[tuple[int, tuple[int, ...]]]:
    for bid in range(grid.total):
        yield bid, tuple(int(c) for c in delinearize(grid, bid))
