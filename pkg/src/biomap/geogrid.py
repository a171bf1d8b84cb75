"""Cell lattice, meta-tiling, land masking and water-cell relocation.

Coordinates are projected planar meters. Row 0 is the southernmost row
(``y_min``); rasters store rows in the same order.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from biomap import kernels

DEFAULT_CELL_SIZE = 50.0
DEFAULT_TILE_SIZE = 25_000.0


class CellIndex(NamedTuple):
    col: int
    row: int


def _cells_per(length_m, cell_size, what):
    ratio = length_m / cell_size
    n = round(ratio)
    if length_m <= 0 or n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ValueError(
            f"{what} {length_m} m must be a positive multiple of the cell size {cell_size} m"
        )
    return int(n)


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    y_min: float
    width: int
    height: int
    cell_size: float = DEFAULT_CELL_SIZE

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(height, width)``."""
        return (self.height, self.width)

    def contains(self, cell: CellIndex) -> bool:
        return 0 <= cell.col < self.width and 0 <= cell.row < self.height

    def flat_index(self, cell: CellIndex) -> int:
        return cell.row * self.width + cell.col

    def cell_at(self, flat: int) -> CellIndex:
        return CellIndex(int(flat % self.width), int(flat // self.width))

    def locate(self, easting: float, northing: float) -> CellIndex | None:
        """Cell containing a point, or None outside the extent."""
        col = math.floor((easting - self.x_min) / self.cell_size)
        row = math.floor((northing - self.y_min) / self.cell_size)
        cell = CellIndex(col, row)
        return cell if self.contains(cell) else None

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "y_min": self.y_min,
            "width": self.width,
            "height": self.height,
            "cell_size": self.cell_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            x_min=float(d["x_min"]),
            y_min=float(d["y_min"]),
            width=int(d["width"]),
            height=int(d["height"]),
            cell_size=float(d.get("cell_size", DEFAULT_CELL_SIZE)),
        )


@dataclass(frozen=True)
class MetaTile:
    tile_col: int
    tile_row: int
    col_start: int
    col_stop: int
    row_start: int
    row_stop: int

    @property
    def width(self) -> int:
        return self.col_stop - self.col_start

    @property
    def height(self) -> int:
        return self.row_stop - self.row_start

    @property
    def window(self) -> tuple[slice, slice]:
        """``(rows, cols)`` slices into a ``(height, width)`` grid array."""
        return slice(self.row_start, self.row_stop), slice(self.col_start, self.col_stop)

    def flat_indices(self, grid: GridSpec) -> np.ndarray:
        rows = np.arange(self.row_start, self.row_stop)
        cols = np.arange(self.col_start, self.col_stop)
        return (rows[:, None] * grid.width + cols[None, :]).ravel()

    @property
    def name(self) -> str:
        return f"r{self.tile_row:04d}_c{self.tile_col:04d}"


def make_tiling(grid: GridSpec, tile_size_m: float = DEFAULT_TILE_SIZE) -> list[MetaTile]:
    """Partition ``grid`` into meta-tiles, row-major over (tile_row, tile_col).

    Edge tiles are truncated to the grid rather than padded.
    """
    side = _cells_per(tile_size_m, grid.cell_size, "tile size")
    tiles = []
    for tr, r0 in enumerate(range(0, grid.height, side)):
        for tc, c0 in enumerate(range(0, grid.width, side)):
            tiles.append(
                MetaTile(tc, tr, c0, min(c0 + side, grid.width), r0, min(r0 + side, grid.height))
            )
    return tiles


def cell_center(grid: GridSpec, cell: CellIndex) -> tuple[float, float]:
    if not grid.contains(cell):
        raise IndexError(f"cell {tuple(cell)} outside {grid.width}x{grid.height} grid")
    return (
        grid.x_min + (cell.col + 0.5) * grid.cell_size,
        grid.y_min + (cell.row + 0.5) * grid.cell_size,
    )


class TerrestrialMask:
    """Boolean land mask with the grid's ``(height, width)`` shape."""

    def __init__(self, bitmask, grid: GridSpec | None = None):
        bitmask = np.asarray(bitmask, dtype=bool)
        if bitmask.ndim != 2:
            raise ValueError("mask must be 2-D")
        if grid is not None and bitmask.shape != grid.shape:
            raise ValueError(f"mask shape {bitmask.shape} != grid shape {grid.shape}")
        self.bitmask = bitmask
        self.bitmask.flags.writeable = False
        self._table = None

    @classmethod
    def all_land(cls, grid: GridSpec) -> "TerrestrialMask":
        return cls(np.ones(grid.shape, dtype=bool), grid)

    @property
    def shape(self):
        return self.bitmask.shape

    def is_land(self, cell: CellIndex) -> bool:
        return bool(self.bitmask[cell.row, cell.col])

    @property
    def n_land(self) -> int:
        return int(self.bitmask.sum())

    def relocation_table(self) -> np.ndarray:
        """Flat index of each cell's nearest land cell (identity on land)."""
        if self._table is None:
            self._table = kernels.nearest_land(self.bitmask)
            self._table.flags.writeable = False
        return self._table


def relocate_to_terrestrial(cell: CellIndex, mask: TerrestrialMask) -> CellIndex:
    """Move a water cell to the land cell with the nearest center.

    Ties go to the smallest row-major index ``row * width + col``; the whole
    grid is searched, not just the cell's meta-tile.
    """
    h, w = mask.shape
    if not (0 <= cell.col < w and 0 <= cell.row < h):
        raise IndexError(f"cell {tuple(cell)} outside {w}x{h} mask")
    land = np.flatnonzero(mask.bitmask.ravel())
    if land.size == 0:
        raise ValueError("mask contains no terrestrial cell")
    if mask.is_land(cell):
        return cell
    dr = land // w - cell.row
    dc = land % w - cell.col
    best = land[np.argmin(dr * dr + dc * dc)]
    return CellIndex(int(best % w), int(best // w))
