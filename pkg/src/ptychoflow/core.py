"""Shared domain types, experiment geometry and scan-path generation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

GOLDEN_ANGLE_DEG = 137.50776
HC_KEV_NM = 1.23984


class BoundsError(IndexError):
    """A patch does not fit inside its parent image."""


@dataclass(frozen=True)
class ScanPosition:
    index: int
    x: float  # nm
    y: float  # nm

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"scan index must be >= 0, got {self.index}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite scan position at index {self.index}")


@dataclass(frozen=True)
class ScanPath:
    positions: tuple[ScanPosition, ...]
    step: float  # nm

    def __post_init__(self):
        if len(self.positions) < 1:
            raise ValueError("a scan path needs at least one position")
        for k, p in enumerate(self.positions):
            if p.index != k:
                raise ValueError(f"scan path indices must run 0..n-1 without gaps (slot {k} has {p.index})")

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)

    def __getitem__(self, k):
        return self.positions[k]

    def xy(self) -> np.ndarray:
        """(n, 2) array of (x, y) in nm."""
        return np.array([(p.x, p.y) for p in self.positions], dtype=np.float64)

    def subset(self, indices) -> list[ScanPosition]:
        return [self.positions[i] for i in indices]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "x_nm", "y_nm"])
        for p in self.positions:
            w.writerow([p.index, repr(float(p.x)), repr(float(p.y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, step: float = float("nan")) -> ScanPath:
        rows = list(csv.DictReader(io.StringIO(text)))
        positions = tuple(ScanPosition(int(r["index"]), float(r["x_nm"]), float(r["y_nm"])) for r in rows)
        return cls(positions, step)


@dataclass(frozen=True)
class ExperimentGeometry:
    photon_energy: float = 10.4  # keV
    detector_pixel: float = 55.0  # um
    detector_distance: float = 1.55  # m
    frame_dim: int = 64

    def __post_init__(self):
        for name in ("photon_energy", "detector_pixel", "detector_distance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        n = self.frame_dim
        if n < 1 or n & (n - 1):
            raise ValueError(f"frame_dim must be a power of two, got {n}")

    @property
    def wavelength_nm(self) -> float:
        return HC_KEV_NM / self.photon_energy


@dataclass(frozen=True)
class ComplexImage:
    """Row-major grid of complex amplitudes; wraps a 2-D complex ndarray."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError("ComplexImage needs a 2-D array")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ComplexImage entries must be finite")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PhaseMap:
    data: np.ndarray  # radians

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError("PhaseMap needs a 2-D array")
        if np.any(np.abs(self.data) > math.pi + 1e-6):
            raise ValueError("phases must lie in [-pi, pi]")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def _median_nn_distance(xy: np.ndarray) -> float:
    dist, _ = cKDTree(xy).query(xy, k=2)
    return float(np.median(dist[:, 1]))


def _unit_spiral(n: int) -> np.ndarray:
    k = np.arange(n, dtype=np.float64)
    theta = np.deg2rad(k * GOLDEN_ANGLE_DEG)
    return np.column_stack([np.sqrt(k) * np.cos(theta), np.sqrt(k) * np.sin(theta)])


def spiral_scale(n: int) -> float:
    """Radial scale ``s0`` giving unit median nearest-neighbour spacing.

    Every coordinate is linear in ``s0``, so a single measurement on the
    unscaled spiral fixes it.
    """
    if n < 2:
        return 1.0
    return 1.0 / _median_nn_distance(_unit_spiral(n))


def spiral_path(n: int, step: float) -> ScanPath:
    """Fermat spiral ``r_k = step * sqrt(k) * s0`` with golden-angle increments.

    Position 0 sits at the origin; ``s0`` comes from :func:`spiral_scale`.
    """
    if n < 1 or not step > 0:
        raise ValueError(f"spiral_path needs n >= 1 and step > 0 (got n={n}, step={step})")
    xy = _unit_spiral(n) * step * spiral_scale(n)
    positions = tuple(ScanPosition(i, float(x), float(y)) for i, (x, y) in enumerate(xy))
    return ScanPath(positions, float(step))


def grid_path(n: int, step: float, cols: int | None = None) -> ScanPath:
    """Raster grid centred on the origin, filled row by row until ``n`` points."""
    if n < 1 or not step > 0:
        raise ValueError(f"grid_path needs n >= 1 and step > 0 (got n={n}, step={step})")
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    x0 = (cols - 1) / 2.0
    y0 = (rows - 1) / 2.0
    positions = []
    for i in range(n):
        r, c = divmod(i, cols)
        positions.append(ScanPosition(i, (c - x0) * step, (r - y0) * step))
    return ScanPath(tuple(positions), float(step))


def real_space_pixel(geom: ExperimentGeometry) -> float:
    """Sample-plane pixel size in nm for a far-field geometry."""
    wavelength_m = geom.wavelength_nm * 1e-9
    pixel_m = geom.detector_pixel * 1e-6
    return wavelength_m * geom.detector_distance / (geom.frame_dim * pixel_m) * 1e9


def position_to_pixel(pos: ScanPosition, pixel_nm: float, shape: tuple[int, int]) -> tuple[int, int]:
    """Map a sample-plane position to a (row, col) pixel centre; origin is the grid centre."""
    return (shape[0] // 2 + int(round(pos.y / pixel_nm)), shape[1] // 2 + int(round(pos.x / pixel_nm)))


def _patch_slices(shape: tuple[int, int], center_px: tuple[int, int], dim: int) -> tuple[slice, slice]:
    r0 = center_px[0] - dim // 2
    c0 = center_px[1] - dim // 2
    if r0 < 0 or c0 < 0 or r0 + dim > shape[0] or c0 + dim > shape[1]:
        raise BoundsError(f"{dim}x{dim} patch centred at {tuple(center_px)} exceeds image of shape {tuple(shape)}")
    return slice(r0, r0 + dim), slice(c0, c0 + dim)


def extract_patch(obj: ComplexImage | np.ndarray, center_px: tuple[int, int], dim: int) -> np.ndarray:
    """Copy of the ``dim x dim`` patch spanning [c - dim/2, c + dim/2) on each axis."""
    arr = obj.data if isinstance(obj, ComplexImage) else obj
    rs, cs = _patch_slices(arr.shape, center_px, dim)
    return arr[rs, cs].copy()


def insert_patch(target: np.ndarray, patch: np.ndarray, center_px: tuple[int, int]) -> None:
    """Add ``patch`` into ``target`` in place, inverse of :func:`extract_patch`."""
    rs, cs = _patch_slices(target.shape, center_px, patch.shape[0])
    target[rs, cs] += patch


def patch_view(arr: np.ndarray, center_px: tuple[int, int], dim: int) -> np.ndarray:
    """Writable view of a patch (no copy)."""
    rs, cs = _patch_slices(arr.shape, center_px, dim)
    return arr[rs, cs]


def illumination_mask(shape: tuple[int, int], centers, window: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """Pixels whose summed window weight reaches ``fraction`` of the maximum."""
    total = np.zeros(shape, dtype=np.float64)
    for c in centers:
        insert_patch(total, window, c)
    return total >= fraction * total.max()

