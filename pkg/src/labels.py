"""
Reference labels, the prediction tensor layout and responsibility assignment.

A prediction tensor has shape T x G x K x (C + 3); every prediction slot holds
C class logits, one existence logit and two DOA parameters (u, v).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .config import ConfigurationError
from .geometry import (
    Direction,
    GridIndex,
    GridSpec,
    angular_distance_deg,
    extended_cell_mask,
    wrap_azimuth,
)

logger = logging.getLogger(__name__)


class RowValidationError(ValueError):
    """A reference row failed validation; carries its row (or file line) number."""

    def __init__(self, row_number: int, message: str):
        super().__init__(f"row {row_number}: {message}")
        self.row_number = row_number


@dataclass(frozen=True)
class ReferenceEvent:
    """One active sound event at one frame."""

    frame: int
    class_id: int
    doa: Direction


@dataclass(frozen=True)
class ReferenceSet:
    """
    All reference events of a scene.

    Events are kept sorted by (frame, class_id); several events of the same
    class may share a frame.
    """

    events: Tuple[ReferenceEvent, ...]
    num_frames: int
    num_classes: int
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self) -> None:
        for event in self.events:
            if not 0 <= event.frame < self.num_frames:
                raise ConfigurationError(
                    f"Event frame {event.frame} outside [0, {self.num_frames})"
                )
            if not 0 <= event.class_id < self.num_classes:
                raise ConfigurationError(
                    f"Event class {event.class_id} outside [0, {self.num_classes})"
                )
        ordered = tuple(sorted(self.events, key=lambda e: (e.frame, e.class_id)))
        object.__setattr__(self, "events", ordered)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def frames(self) -> NDArray[np.int64]:
        return np.array([e.frame for e in self.events], dtype=np.int64)

    @property
    def class_ids(self) -> NDArray[np.int64]:
        return np.array([e.class_id for e in self.events], dtype=np.int64)

    @property
    def azimuths(self) -> NDArray[np.float64]:
        return np.array([e.doa.azimuth for e in self.events], dtype=np.float64)

    @property
    def elevations(self) -> NDArray[np.float64]:
        return np.array([e.doa.elevation for e in self.events], dtype=np.float64)

    def extended_masks(self) -> NDArray[np.bool_]:
        """(M, G) extended-cell membership of every reference."""
        if not self.events:
            return np.zeros((0, self.grid.num_cells), dtype=bool)
        return extended_cell_mask(self.azimuths, self.elevations, self.grid)

    def events_at(self, frame: int) -> List[ReferenceEvent]:
        return [e for e in self.events if e.frame == frame]


def events_to_reference_set(
    rows: Iterable[Sequence[float]],
    num_frames: int,
    num_classes: int,
    spec: GridSpec,
    row_offset: int = 0,
) -> ReferenceSet:
    """
    Validate (frame, class, azimuth, elevation) rows into a ReferenceSet.

    Args:
        rows: Iterable of 4-tuples
        num_frames: Number of frames T
        num_classes: Number of classes C
        spec: Grid the references are encoded on
        row_offset: Added to the 0-based row position in error messages
            (file loaders pass the line number of the first data row)

    Returns:
        ReferenceSet: Sorted references; duplicate rows are preserved

    Raises:
        RowValidationError: On the first malformed row
    """
    events = []
    for position, row in enumerate(rows):
        number = position + row_offset
        if len(row) != 4:
            raise RowValidationError(number, f"expected 4 fields, got {len(row)}")
        frame, class_id, azimuth, elevation = row
        if int(frame) != frame or not 0 <= int(frame) < num_frames:
            raise RowValidationError(number, f"frame {frame} outside [0, {num_frames})")
        if int(class_id) != class_id or not 0 <= int(class_id) < num_classes:
            raise RowValidationError(number, f"class {class_id} outside [0, {num_classes})")
        try:
            doa = Direction(float(azimuth), float(elevation))
        except ValueError as e:
            raise RowValidationError(number, str(e)) from e
        events.append(ReferenceEvent(int(frame), int(class_id), doa))
    return ReferenceSet(tuple(events), num_frames, num_classes, spec)


@dataclass(frozen=True)
class DecodedDoas:
    """
    Decoded DOAs of every slot with their derivatives w.r.t. the raw (u, v).

    All arrays have shape (T, G, K).
    """

    azimuth: NDArray[np.float64]
    elevation: NDArray[np.float64]
    d_azimuth_du: NDArray[np.float64]
    d_elevation_dv: NDArray[np.float64]


def decode_doa_arrays(
    u: NDArray[np.float64], v: NDArray[np.float64], spec: GridSpec
) -> DecodedDoas:
    """
    Map raw DOA parameters of shape (T, G, K) to directions.

    Each slot reaches its cell center +- half of the overlap-extended cell.
    """
    center_az, center_el = spec.cell_centers()
    su, sv = expit(u), expit(v)
    azimuth = center_az[None, :, None] + (su - 0.5) * spec.lon_reach
    raw_el = center_el[None, :, None] + (sv - 0.5) * spec.lat_reach
    elevation = np.clip(raw_el, -90.0, 90.0)
    inside = (raw_el > -90.0) & (raw_el < 90.0)
    return DecodedDoas(
        azimuth=wrap_azimuth(azimuth),
        elevation=elevation,
        d_azimuth_du=su * (1.0 - su) * spec.lon_reach,
        d_elevation_dv=np.where(inside, sv * (1.0 - sv) * spec.lat_reach, 0.0),
    )


def decode_doa(raw_doa: Tuple[float, float], cell: GridIndex, spec: GridSpec) -> Direction:
    """
    Decode one slot's raw (u, v) anchored at a cell.

    azimuth = center + (sigmoid(u) - 0.5) * cell_width * (1 + 2 * overlap),
    elevation likewise, then clamped to [-90, 90].
    """
    center = spec.cell_center(cell)
    u, v = raw_doa
    azimuth = center.azimuth + (float(expit(u)) - 0.5) * spec.lon_reach
    elevation = center.elevation + (float(expit(v)) - 0.5) * spec.lat_reach
    return Direction(azimuth, min(90.0, max(-90.0, elevation)))


class PredictionTensor:
    """Raw network output of shape T x G x K x (C + 3)."""

    def __init__(self, raw: NDArray[np.float64], grid: GridSpec, num_classes: int):
        """
        Wrap a raw output array.

        Args:
            raw: Array of shape (T, G, K, C + 3)
            grid: Grid the slots are anchored to
            num_classes: Number of classes C

        Raises:
            ConfigurationError: If the shape disagrees with the grid or C
            ValueError: If any value is not finite
        """
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 4:
            raise ConfigurationError(f"Prediction tensor must be 4-D, got shape {raw.shape}")
        if raw.shape[1] != grid.num_cells:
            raise ConfigurationError(
                f"Prediction tensor has {raw.shape[1]} cells, grid has {grid.num_cells}"
            )
        if raw.shape[3] != num_classes + 3:
            raise ConfigurationError(
                f"Prediction width {raw.shape[3]} does not match {num_classes} classes + 3"
            )
        if not np.all(np.isfinite(raw)):
            raise ValueError("Prediction tensor contains non-finite values")
        self.raw = raw
        self.grid = grid
        self.num_classes = num_classes
        self._decoded: Optional[DecodedDoas] = None

    @classmethod
    def zeros(
        cls, num_frames: int, grid: GridSpec, num_predictions: int, num_classes: int
    ) -> "PredictionTensor":
        shape = (num_frames, grid.num_cells, num_predictions, num_classes + 3)
        return cls(np.zeros(shape), grid, num_classes)

    @property
    def num_frames(self) -> int:
        return int(self.raw.shape[0])

    @property
    def num_predictions(self) -> int:
        return int(self.raw.shape[2])

    @property
    def class_logits(self) -> NDArray[np.float64]:
        return self.raw[..., : self.num_classes]

    @property
    def existence_logits(self) -> NDArray[np.float64]:
        return self.raw[..., self.num_classes]

    @property
    def existence_index(self) -> int:
        return self.num_classes

    @property
    def doa_slice(self) -> slice:
        return slice(self.num_classes + 1, self.num_classes + 3)

    def decoded(self) -> DecodedDoas:
        """Decoded DOAs of all slots (cached; the raw array is treated as read-only)."""
        if self._decoded is None:
            self._decoded = decode_doa_arrays(
                self.raw[..., self.num_classes + 1], self.raw[..., self.num_classes + 2], self.grid
            )
        return self._decoded

    def slot_direction(self, frame: int, cell: int, k: int) -> Direction:
        decoded = self.decoded()
        return Direction(
            float(decoded.azimuth[frame, cell, k]), float(decoded.elevation[frame, cell, k])
        )


@dataclass(frozen=True)
class ResponsiblePairs:
    """
    Reference/slot pairs responsible at one threshold.

    Every array has one entry per pair (m, t, g, k) with its distance in degrees.
    """

    ref_index: NDArray[np.int64]
    frame: NDArray[np.int64]
    cell: NDArray[np.int64]
    slot: NDArray[np.int64]
    distance: NDArray[np.float64]

    def __len__(self) -> int:
        return int(self.ref_index.shape[0])


@dataclass(frozen=True)
class ResponsibilityMasks:
    """
    Per-threshold responsibility.

    Attributes:
        thresholds: Thresholds in degrees, largest first
        existence: tau -> boolean (T, G, K), the union over references
        classes: tau -> boolean (T, G, K, C)
        pairs: tau -> every responsible (reference, slot) pair
        num_references: Number of references the masks were built for
    """

    thresholds: Tuple[float, ...]
    existence: Dict[float, NDArray[np.bool_]]
    classes: Dict[float, NDArray[np.bool_]]
    pairs: Dict[float, ResponsiblePairs]
    num_references: int = 0

    def slots_for(self, ref_index: int, tau: float) -> List[Tuple[int, int, int, float]]:
        """(t, g, k, distance) of every slot responsible for reference m at tau."""
        pairs = self.pairs[tau]
        chosen = np.flatnonzero(pairs.ref_index == ref_index)
        return [
            (int(pairs.frame[p]), int(pairs.cell[p]), int(pairs.slot[p]), float(pairs.distance[p]))
            for p in chosen
        ]

    def summary(self) -> Dict[str, Dict[str, int]]:
        """Counts per threshold, keyed by the threshold formatted in degrees."""
        report = {}
        for tau in self.thresholds:
            pairs = self.pairs[tau]
            covered = np.unique(pairs.ref_index).shape[0]
            report[f"{tau:g}"] = {
                "responsible_pairs": len(pairs),
                "responsible_slots": int(self.existence[tau].sum()),
                "class_positives": int(self.classes[tau].sum()),
                "references_covered": int(covered),
                "references_uncovered": self.num_references - int(covered),
            }
        return report


def check_shapes(refs: ReferenceSet, preds: PredictionTensor) -> None:
    """
    Raises:
        ConfigurationError: If references and predictions disagree on T, C or the grid
    """
    if refs.num_frames != preds.num_frames:
        raise ConfigurationError(
            f"References span {refs.num_frames} frames, predictions {preds.num_frames}"
        )
    if refs.num_classes != preds.num_classes:
        raise ConfigurationError(
            f"References use {refs.num_classes} classes, predictions {preds.num_classes}"
        )
    if refs.grid != preds.grid:
        raise ConfigurationError(f"Grid mismatch: {refs.grid} vs {preds.grid}")


def assign_responsibility(
    refs: ReferenceSet,
    preds: PredictionTensor,
    thresholds: Iterable[float],
    extended: Optional[NDArray[np.bool_]] = None,
) -> ResponsibilityMasks:
    """
    Mark every slot responsible for each reference at each threshold.

    A slot (t_m, g, k) is responsible for reference m at tau when g is one of
    the reference's extended cells and the slot's decoded DOA lies strictly
    closer than tau to the reference.

    Args:
        refs: Reference events
        preds: Prediction tensor
        thresholds: Responsibility thresholds in degrees
        extended: Optional precomputed refs.extended_masks()

    Returns:
        ResponsibilityMasks: Masks and pairs per threshold

    Raises:
        ConfigurationError: On shape mismatch or empty thresholds
    """
    taus = tuple(sorted({float(t) for t in thresholds}, reverse=True))
    if not taus:
        raise ConfigurationError("At least one responsibility threshold is required")
    check_shapes(refs, preds)

    num_frames, num_cells, num_slots = preds.raw.shape[:3]
    existence: Dict[float, NDArray[np.bool_]] = {}
    classes: Dict[float, NDArray[np.bool_]] = {}
    pairs: Dict[float, ResponsiblePairs] = {}

    if len(refs) == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        for tau in taus:
            existence[tau] = np.zeros((num_frames, num_cells, num_slots), dtype=bool)
            classes[tau] = np.zeros(
                (num_frames, num_cells, num_slots, preds.num_classes), dtype=bool
            )
            pairs[tau] = ResponsiblePairs(empty_i, empty_i, empty_i, empty_i, np.zeros(0))
        return ResponsibilityMasks(taus, existence, classes, pairs, len(refs))

    if extended is None:
        extended = refs.extended_masks()
    frames, class_ids = refs.frames, refs.class_ids
    decoded = preds.decoded()
    # (M, G, K) distances between every reference and the slots of its frame
    distance = angular_distance_deg(
        decoded.azimuth[frames],
        decoded.elevation[frames],
        refs.azimuths[:, None, None],
        refs.elevations[:, None, None],
    )
    for tau in taus:
        hit = extended[:, :, None] & (distance < tau)
        m_idx, g_idx, k_idx = np.nonzero(hit)
        t_idx = frames[m_idx]
        exist = np.zeros((num_frames, num_cells, num_slots), dtype=bool)
        exist[t_idx, g_idx, k_idx] = True
        cls = np.zeros((num_frames, num_cells, num_slots, preds.num_classes), dtype=bool)
        cls[t_idx, g_idx, k_idx, class_ids[m_idx]] = True
        existence[tau] = exist
        classes[tau] = cls
        pairs[tau] = ResponsiblePairs(
            ref_index=m_idx.astype(np.int64),
            frame=t_idx.astype(np.int64),
            cell=g_idx.astype(np.int64),
            slot=k_idx.astype(np.int64),
            distance=distance[m_idx, g_idx, k_idx],
        )
        logger.debug(f"tau={tau:g}: {len(m_idx)} responsible pairs, {int(exist.sum())} slots")
    return ResponsibilityMasks(taus, existence, classes, pairs, len(refs))
