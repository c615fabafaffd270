"""Rectangular scalar maps with a physical (normalized) extent."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNITS = ("mT", "MHz", "counts", "dimensionless")


@dataclass(frozen=True)
class ScalarGrid:
    """Scalar map sampled on an ``ny`` x ``nx`` pixel lattice.

    ``values[j, i]`` is the pixel at column ``i`` (x) and row ``j`` (y).
    Pixel centers span ``[0, width] x [0, height]`` inclusive.
    """

    values: np.ndarray
    unit: str = "dimensionless"
    width: float = 1.0
    height: float = 1.0
    mask: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2:
            raise ValueError(f"grid values must be 2-D, got shape {vals.shape}")
        ny, nx = vals.shape
        if nx < 2 or ny < 2:
            raise ValueError(f"grid needs nx >= 2 and ny >= 2, got {nx}x{ny}")
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit {self.unit!r}; expected one of {UNITS}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("grid extent must be positive")
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != vals.shape:
                raise ValueError("mask shape does not match values")
            vals = np.where(mask, vals, 0.0)
            object.__setattr__(self, "mask", mask)
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite (use a mask for invalid pixels)")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    @property
    def ny(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.mask

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` coordinate arrays with the grid's shape."""
        return pixel_coords(self.nx, self.ny, self.width, self.height)

    def with_values(self, values, unit: str | None = None, mask=None) -> "ScalarGrid":
        return ScalarGrid(values, unit or self.unit, self.width, self.height, mask)

    def __eq__(self, other):
        if not isinstance(other, ScalarGrid):
            return NotImplemented
        return (
            self.unit == other.unit
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.valid, other.valid)
        )


def pixel_coords(nx: int, ny: int, width: float = 1.0, height: float = 1.0):
    x = np.linspace(0.0, width, nx)
    y = np.linspace(0.0, height, ny)
    return np.meshgrid(x, y)
