"""BEV grid types shared by the simulator and the perception pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2


@dataclass(frozen=True)
class GridSpec:
    """Bird's-eye-view grid expressed in the owning vehicle's frame.

    ``origin`` places cell (0, 0)'s corner in the vehicle frame; rows step
    along the grid x axis, columns along the grid y axis.
    """

    height_cells: int
    width_cells: int
    resolution: float
    origin: Pose2 = field(default_factory=Pose2.identity)
    kernel_sigma: float = 1.0

    def __post_init__(self):
        if self.height_cells < 1 or self.width_cells < 1:
            raise ValueError("grid must have at least one cell per axis")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @staticmethod
    def centered(height_cells: int, width_cells: int, resolution: float,
                 kernel_sigma: float = 1.0) -> "GridSpec":
        """Grid centered on the vehicle."""
        ox = -0.5 * height_cells * resolution
        oy = -0.5 * width_cells * resolution
        return GridSpec(height_cells, width_cells, resolution,
                        Pose2(ox, oy, 0.0), kernel_sigma)

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) array of cell-center coordinates in the vehicle frame."""
        r = np.arange(self.height_cells) + 0.5
        c = np.arange(self.width_cells) + 0.5
        gx = r[:, None] * self.resolution
        gy = c[None, :] * self.resolution
        pts = np.stack([np.broadcast_to(gx, (self.height_cells, self.width_cells)),
                        np.broadcast_to(gy, (self.height_cells, self.width_cells))],
                       axis=-1)
        flat = self.origin.apply(pts.reshape(-1, 2))
        return flat.reshape(self.height_cells, self.width_cells, 2)

    def cell_index(self, point) -> tuple[int, int] | None:
        """Cell (row, col) containing a vehicle-frame point, or None if outside."""
        from .geometry import inverse
        local = inverse(self.origin).apply(np.asarray(point, dtype=float))
        r = int(np.floor(local[0] / self.resolution))
        c = int(np.floor(local[1] / self.resolution))
        if 0 <= r < self.height_cells and 0 <= c < self.width_cells:
            return r, c
        return None


@dataclass
class ConfidenceMap:
    """Per-cell likelihood of a moving object, values in [0, 1]."""

    grid: GridSpec
    values: np.ndarray
    vehicle: int = -1
    stamp: int = -1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.grid.height_cells, self.grid.width_cells)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != grid {expected}")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("confidence values must lie in [0, 1]")


@dataclass
class BinaryMask:
    """Thresholded grid with cell values in {0, 1}."""

    grid: GridSpec
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits)
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ValueError("mask bits must be 0 or 1")
        self.bits = self.bits.astype(np.uint8)

    def count(self) -> int:
        return int(self.bits.sum())
