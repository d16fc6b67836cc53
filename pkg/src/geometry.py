"""
Spherical geometry for sound event localization.
Provides directions on the unit sphere, great-circle distances with analytic
gradients, and the longitude-latitude grid with overlap membership.
"""

import math
import logging
from dataclasses import dataclass
from typing import Set, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

logger = logging.getLogger(__name__)

# Below this distance (degrees) the gradient of the angular distance is
# undefined and the zero subgradient is returned.
GRAD_EPSILON_DEG: float = 1e-7


def wrap_azimuth(azimuth: ArrayLike) -> NDArray[np.float64]:
    """Wrap azimuth values (degrees) into [-180, 180)."""
    values = np.asarray(azimuth, dtype=np.float64)
    wrapped = np.mod(values + 180.0, 360.0) - 180.0
    # np.mod can return 360.0 for tiny negative inputs
    wrapped = np.where(wrapped >= 180.0, wrapped - 360.0, wrapped)
    # in-range values are returned bit-for-bit
    return np.where((values >= -180.0) & (values < 180.0), values, wrapped)


@dataclass(frozen=True)
class Direction:
    """
    A point on the unit sphere.

    Attributes:
        azimuth: Degrees, normalized into [-180, 180)
        elevation: Degrees in [-90, 90]
    """

    azimuth: float
    elevation: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.azimuth) and math.isfinite(self.elevation)):
            raise ValueError(
                f"Direction angles must be finite, got ({self.azimuth}, {self.elevation})"
            )
        if not -90.0 <= self.elevation <= 90.0:
            raise ValueError(f"Elevation {self.elevation} outside [-90, 90]")
        object.__setattr__(self, "azimuth", float(wrap_azimuth(self.azimuth)))
        object.__setattr__(self, "elevation", float(self.elevation))

    def to_cartesian(self) -> NDArray[np.float64]:
        """Unit Cartesian vector (x, y, z)."""
        return to_cartesian(self.azimuth, self.elevation)

    @classmethod
    def from_cartesian(cls, vector: ArrayLike) -> "Direction":
        """
        Build a Direction from a non-zero Cartesian vector.

        Raises:
            ValueError: If the vector has zero length
        """
        azimuth, elevation = from_cartesian(vector)
        return cls(float(azimuth), float(elevation))


def to_cartesian(azimuth: ArrayLike, elevation: ArrayLike) -> NDArray[np.float64]:
    """Convert degrees to unit vectors; the last axis holds (x, y, z)."""
    lam = np.deg2rad(np.asarray(azimuth, dtype=np.float64))
    phi = np.deg2rad(np.asarray(elevation, dtype=np.float64))
    return np.stack(
        [np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)], axis=-1
    )


def from_cartesian(
    vector: ArrayLike,
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Convert Cartesian vectors (last axis x, y, z) to (azimuth, elevation) degrees."""
    v = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm == 0.0):
        raise ValueError("Cannot convert a zero-length vector to a direction")
    x, y, z = v[..., 0] / norm, v[..., 1] / norm, v[..., 2] / norm
    elevation = np.rad2deg(np.arcsin(np.clip(z, -1.0, 1.0)))
    azimuth = wrap_azimuth(np.rad2deg(np.arctan2(y, x)))
    return azimuth, elevation


def angular_distance_deg(
    az1: ArrayLike, el1: ArrayLike, az2: ArrayLike, el2: ArrayLike
) -> NDArray[np.float64]:
    """
    Vectorized great-circle central angle in degrees.

    The arccos argument is clamped to [-1, 1] before evaluation.
    """
    lam1, phi1 = np.deg2rad(az1), np.deg2rad(el1)
    lam2, phi2 = np.deg2rad(az2), np.deg2rad(el2)
    cos_delta = np.sin(phi1) * np.sin(phi2) + np.cos(phi1) * np.cos(phi2) * np.cos(
        lam1 - lam2
    )
    return np.rad2deg(np.arccos(np.clip(cos_delta, -1.0, 1.0)))


def angular_distance_grad_deg(
    az1: ArrayLike, el1: ArrayLike, az2: ArrayLike, el2: ArrayLike
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Vectorized partial derivatives of the angular distance with respect to
    the first direction's azimuth and elevation.

    Degrees per degree equals radians per radian, so no unit factor appears.
    Returns zeros wherever the distance is within GRAD_EPSILON_DEG of 0 or 180.
    """
    lam1, phi1 = np.deg2rad(az1), np.deg2rad(el1)
    lam2, phi2 = np.deg2rad(az2), np.deg2rad(el2)
    dlam = lam1 - lam2
    cos1, sin1 = np.cos(phi1), np.sin(phi1)
    cos2, sin2 = np.cos(phi2), np.sin(phi2)
    cos_delta = sin1 * sin2 + cos1 * cos2 * np.cos(dlam)

    # |a x b| is accurate for small angles where sqrt(1 - c^2) is not
    cross = np.cross(to_cartesian(az1, el1), to_cartesian(az2, el2))
    sin_delta = np.linalg.norm(cross, axis=-1)
    delta = np.rad2deg(np.arctan2(sin_delta, cos_delta))

    dc_dlam = -cos1 * cos2 * np.sin(dlam)
    dc_dphi = cos1 * sin2 - sin1 * cos2 * np.cos(dlam)

    singular = (delta < GRAD_EPSILON_DEG) | (delta > 180.0 - GRAD_EPSILON_DEG)
    safe_sin = np.where(singular, 1.0, sin_delta)
    d_az = np.where(singular, 0.0, -dc_dlam / safe_sin)
    d_el = np.where(singular, 0.0, -dc_dphi / safe_sin)
    return d_az, d_el


def angular_distance(a: Direction, b: Direction) -> float:
    """Great-circle central angle between two directions, in degrees [0, 180]."""
    return float(angular_distance_deg(a.azimuth, a.elevation, b.azimuth, b.elevation))


def angular_distance_grad(a: Direction, b_fixed: Direction) -> Tuple[float, float]:
    """
    Partial derivatives of angular_distance(a, b_fixed) with respect to a's
    azimuth and elevation (degrees per degree).
    """
    d_az, d_el = angular_distance_grad_deg(
        a.azimuth, a.elevation, b_fixed.azimuth, b_fixed.elevation
    )
    return float(d_az), float(d_el)


@dataclass(frozen=True)
class GridIndex:
    """
    Cell of the longitude-latitude grid.

    flat == j * (360 / cell_width) + i
    """

    i: int
    j: int
    flat: int


@dataclass(frozen=True)
class GridSpec:
    """
    Equirectangular partition of the sphere.

    Attributes:
        cell_width: Longitude extent of a cell in degrees
        cell_height: Latitude extent of a cell in degrees
        overlap_fraction: Extension of each cell, per side, as a fraction of
            the cell size
    """

    cell_width: float = 45.0
    cell_height: float = 45.0
    overlap_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.cell_width <= 0 or self.cell_height <= 0:
            raise ValueError(
                f"Cell sizes must be positive, got ({self.cell_width}, {self.cell_height})"
            )
        if not _divides(360.0, self.cell_width):
            raise ValueError(f"Cell width {self.cell_width} does not tile 360 degrees")
        if not _divides(180.0, self.cell_height):
            raise ValueError(f"Cell height {self.cell_height} does not tile 180 degrees")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError(f"Overlap fraction {self.overlap_fraction} outside [0, 1)")

    @property
    def num_lon(self) -> int:
        return int(round(360.0 / self.cell_width))

    @property
    def num_lat(self) -> int:
        return int(round(180.0 / self.cell_height))

    @property
    def num_cells(self) -> int:
        return self.num_lon * self.num_lat

    @property
    def lon_reach(self) -> float:
        """Full longitude span a cell covers once extended by the overlap."""
        return self.cell_width * (1.0 + 2.0 * self.overlap_fraction)

    @property
    def lat_reach(self) -> float:
        return self.cell_height * (1.0 + 2.0 * self.overlap_fraction)

    def index(self, i: int, j: int) -> GridIndex:
        """
        Build a GridIndex from longitude and latitude cell indices.

        Raises:
            ValueError: If either index is out of range
        """
        if not (0 <= i < self.num_lon and 0 <= j < self.num_lat):
            raise ValueError(f"Cell ({i}, {j}) outside a {self.num_lon}x{self.num_lat} grid")
        return GridIndex(i=i, j=j, flat=j * self.num_lon + i)

    def from_flat(self, flat: int) -> GridIndex:
        if not 0 <= flat < self.num_cells:
            raise ValueError(f"Flat cell index {flat} outside [0, {self.num_cells})")
        return self.index(flat % self.num_lon, flat // self.num_lon)

    def cell_bounds(self, cell: GridIndex) -> Tuple[float, float, float, float]:
        """(lon_low, lon_high, lat_low, lat_high) of the non-extended cell."""
        lon_low = -180.0 + cell.i * self.cell_width
        lat_low = -90.0 + cell.j * self.cell_height
        return lon_low, lon_low + self.cell_width, lat_low, lat_low + self.cell_height

    def cell_center(self, cell: GridIndex) -> Direction:
        lon_low, lon_high, lat_low, lat_high = self.cell_bounds(cell)
        return Direction((lon_low + lon_high) / 2.0, (lat_low + lat_high) / 2.0)

    def cell_centers(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Centers of all cells as (azimuth, elevation) arrays indexed by flat index."""
        flat = np.arange(self.num_cells)
        i, j = flat % self.num_lon, flat // self.num_lon
        azimuth = -180.0 + (i + 0.5) * self.cell_width
        elevation = -90.0 + (j + 0.5) * self.cell_height
        return azimuth, elevation


def _divides(total: float, size: float) -> bool:
    count = total / size
    return abs(count - round(count)) < 1e-9 and round(count) >= 1


def cell_indices(
    azimuth: ArrayLike, elevation: ArrayLike, spec: GridSpec
) -> Tuple[NDArray[np.int64], NDArray[np.int64]]:
    """
    Vectorized base-cell lookup.

    Intervals are half-open [low, high) in both axes; the +90 degree edge
    belongs to the last latitude row.
    """
    az = wrap_azimuth(azimuth)
    el = np.asarray(elevation, dtype=np.float64)
    i = np.floor((az + 180.0) / spec.cell_width).astype(np.int64)
    j = np.floor((el + 90.0) / spec.cell_height).astype(np.int64)
    return np.clip(i, 0, spec.num_lon - 1), np.clip(j, 0, spec.num_lat - 1)


def cell_of(d: Direction, spec: GridSpec) -> GridIndex:
    """Return the unique non-extended cell containing d."""
    i, j = cell_indices(d.azimuth, d.elevation, spec)
    return spec.index(int(i), int(j))


def extended_cell_mask(
    azimuth: ArrayLike, elevation: ArrayLike, spec: GridSpec
) -> NDArray[np.bool_]:
    """
    Vectorized extended-cell membership.

    For N directions returns a boolean array of shape (N, G) (or (G,) for a
    scalar direction). A cell covers a direction when the direction lies
    strictly inside the cell grown by overlap_fraction on every side, or in
    the cell itself. Longitude wraps around +-180; latitude stops at the poles.
    """
    az = np.atleast_1d(wrap_azimuth(azimuth))
    el = np.atleast_1d(np.asarray(elevation, dtype=np.float64))
    lon_ext = spec.overlap_fraction * spec.cell_width
    lat_ext = spec.overlap_fraction * spec.cell_height

    lon_low = -180.0 + np.arange(spec.num_lon) * spec.cell_width
    rel = np.mod(az[:, None] - lon_low[None, :], 360.0)
    lon_in = (rel < spec.cell_width + lon_ext) | (rel > 360.0 - lon_ext)

    lat_low = -90.0 + np.arange(spec.num_lat) * spec.cell_height
    lat_in = (el[:, None] > lat_low[None, :] - lat_ext) & (
        el[:, None] < lat_low[None, :] + spec.cell_height + lat_ext
    )

    base_i, base_j = cell_indices(az, el, spec)
    rows = np.arange(az.shape[0])
    lon_in[rows, base_i] = True
    lat_in[rows, base_j] = True

    # flat index = j * num_lon + i
    mask = (lat_in[:, :, None] & lon_in[:, None, :]).reshape(az.shape[0], -1)
    if np.ndim(azimuth) == 0:
        return mask[0]
    return mask


def extended_cells_of(d: Direction, spec: GridSpec) -> Set[GridIndex]:
    """Every cell whose overlap-extended boundaries contain d."""
    mask = extended_cell_mask(d.azimuth, d.elevation, spec)
    return {spec.from_flat(int(flat)) for flat in np.flatnonzero(mask)}
