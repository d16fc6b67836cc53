"""
File formats: reference and detection CSVs, the binary tensor format,
loss-curve CSVs and JSON result documents.
"""

import json
import logging
import os
import re
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from .decoder import Detection
from .geometry import Direction, GridSpec
from .labels import ReferenceEvent, ReferenceSet, RowValidationError
from .loss import LossBreakdown

logger = logging.getLogger(__name__)

REFERENCE_COLUMNS = ["frame", "class_id", "source_id", "azimuth_deg", "elevation_deg"]
DETECTION_COLUMNS = ["frame", "class_id", "azimuth_deg", "elevation_deg", "score"]
LOSS_CURVE_COLUMNS = ["epoch", "l_delta", "l_pos", "l_neg", "l_class", "total"]

# Header: magic, then four dimensions, all little-endian int32
TENSOR_MAGIC = 0x50594441  # b"ADYP"
FEATURE_MAGIC = 0x46594441  # b"ADYF"
HEADER_DTYPE = np.dtype("<i4")
DATA_DTYPE = np.dtype("<f4")
HEADER_FIELDS = 5

# First data row of a CSV file sits on line 2
FIRST_DATA_LINE = 2


class TensorFormatError(ValueError):
    """Binary tensor file with a bad magic, an unexpected header or a truncated payload."""


@dataclass(frozen=True)
class EventCsvRow:
    """One row of the reference CSV; source_id is -1 when unknown."""

    frame: int
    class_id: int
    source_id: int
    azimuth_deg: float
    elevation_deg: float

    @classmethod
    def from_fields(cls, fields: Dict[str, str], line: int) -> "EventCsvRow":
        """
        Parse one CSV record.

        Raises:
            RowValidationError: If a field is missing or not a number
        """
        try:
            return cls(
                frame=int(fields["frame"]),
                class_id=int(fields["class_id"]),
                source_id=int(fields.get("source_id") or -1),
                azimuth_deg=float(fields["azimuth_deg"]),
                elevation_deg=float(fields["elevation_deg"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise RowValidationError(line, f"malformed record {dict(fields)} ({e})") from e

    def as_record(self) -> Dict[str, Any]:
        return {
            "frame": self.frame,
            "class_id": self.class_id,
            "source_id": self.source_id,
            "azimuth_deg": self.azimuth_deg,
            "elevation_deg": self.elevation_deg,
        }


def _read_table(path: str, required: Sequence[str]) -> pd.DataFrame:
    """
    Read a headed CSV with every field kept as text.

    Raises:
        RowValidationError: If the header lacks a required column
        OSError: If the file cannot be read
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise RowValidationError(1, f"{path} is empty; a header line is required") from e
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        raise RowValidationError(int(found.group(1)) if found else 1, f"{path}: {e}") from e
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise RowValidationError(1, f"{path}: header lacks {', '.join(missing)}")
    return frame


def _records(frame: pd.DataFrame) -> Iterable[tuple]:
    for position, record in enumerate(frame.to_dict(orient="records")):
        yield position + FIRST_DATA_LINE, record


def read_reference_rows(path: str) -> List[EventCsvRow]:
    """
    Load the raw rows of a reference CSV.

    Raises:
        RowValidationError: With the file line number of the first bad row
    """
    required = [c for c in REFERENCE_COLUMNS if c != "source_id"]
    table = _read_table(path, required)
    return [EventCsvRow.from_fields(record, line) for line, record in _records(table)]


def read_references(
    path: str,
    num_classes: int,
    grid: Optional[GridSpec] = None,
    num_frames: Optional[int] = None,
) -> ReferenceSet:
    """
    Load a reference CSV into a ReferenceSet.

    Args:
        path: CSV path
        num_classes: Number of classes C
        grid: Grid the references are encoded on
        num_frames: Number of frames T; defaults to the last frame + 1

    Returns:
        ReferenceSet: Validated references

    Raises:
        RowValidationError: With the file line number of the first bad row
    """
    grid = grid or GridSpec()
    rows = read_reference_rows(path)
    if num_frames is None:
        num_frames = max((row.frame for row in rows), default=-1) + 1
    events = []
    for line, row in enumerate(rows, start=FIRST_DATA_LINE):
        if not 0 <= row.frame < num_frames:
            raise RowValidationError(line, f"frame {row.frame} outside [0, {num_frames})")
        if not 0 <= row.class_id < num_classes:
            raise RowValidationError(line, f"class {row.class_id} outside [0, {num_classes})")
        try:
            doa = Direction(row.azimuth_deg, row.elevation_deg)
        except ValueError as e:
            raise RowValidationError(line, str(e)) from e
        events.append(ReferenceEvent(row.frame, row.class_id, doa))
    logger.info(f"Loaded {len(events)} references from {path}")
    return ReferenceSet(tuple(events), max(num_frames, 1), num_classes, grid)


def write_references(path: str, refs: ReferenceSet) -> None:
    """Write references with exact float text; source ids are unknown (-1)."""
    rows = [
        EventCsvRow(e.frame, e.class_id, -1, e.doa.azimuth, e.doa.elevation).as_record()
        for e in refs.events
    ]
    _write_table(path, rows, REFERENCE_COLUMNS)
    logger.info(f"Wrote {len(rows)} references to {path}")


def read_detections(path: str) -> List[Detection]:
    """
    Load detections; a reference CSV is accepted too, with every score 1.0.

    Raises:
        RowValidationError: With the file line number of the first bad row
    """
    table = _read_table(path, ["frame", "class_id", "azimuth_deg", "elevation_deg"])
    has_score = "score" in table.columns
    detections = []
    for line, record in _records(table):
        try:
            frame, class_id = int(record["frame"]), int(record["class_id"])
            doa = Direction(float(record["azimuth_deg"]), float(record["elevation_deg"]))
            score = float(record["score"]) if has_score else 1.0
        except ValueError as e:
            raise RowValidationError(line, f"malformed detection {record} ({e})") from e
        if frame < 0 or class_id < 0:
            raise RowValidationError(line, "frame and class_id must be non-negative")
        if not 0.0 < score <= 1.0:
            raise RowValidationError(line, f"score {score} outside (0, 1]")
        detections.append(Detection(frame, class_id, doa, score))
    logger.info(f"Loaded {len(detections)} detections from {path}")
    return detections


def write_detections(path: str, detections: Sequence[Detection]) -> None:
    rows = [
        {
            "frame": d.frame,
            "class_id": d.class_id,
            "azimuth_deg": d.doa.azimuth,
            "elevation_deg": d.doa.elevation,
            "score": d.score,
        }
        for d in detections
    ]
    _write_table(path, rows, DETECTION_COLUMNS)
    logger.info(f"Wrote {len(rows)} detections to {path}")


def write_loss_curve(path: str, curve: Sequence[LossBreakdown]) -> None:
    """One row per epoch; per-threshold terms are averaged over the thresholds."""
    rows = [{"epoch": epoch, **breakdown.as_row()} for epoch, breakdown in enumerate(curve)]
    _write_table(path, rows, LOSS_CURVE_COLUMNS)
    logger.info(f"Wrote loss curve with {len(rows)} epochs to {path}")


def read_loss_curve(path: str) -> pd.DataFrame:
    return pd.read_csv(path)


def _write_table(path: str, rows: List[Dict[str, Any]], columns: List[str]) -> None:
    _ensure_parent(path)
    # str(float) is the shortest text that parses back to the same value
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_binary(path: str, magic: int, dims: Sequence[int], data: NDArray[Any]) -> None:
    _ensure_parent(path)
    header = np.array([magic, *dims], dtype=HEADER_DTYPE)
    with open(path, "wb") as handle:
        handle.write(header.tobytes())
        handle.write(np.ascontiguousarray(data, dtype=DATA_DTYPE).tobytes())


def _read_binary(path: str, magic: int) -> tuple:
    with open(path, "rb") as handle:
        payload = handle.read()
    header_size = HEADER_FIELDS * HEADER_DTYPE.itemsize
    if len(payload) < header_size:
        raise TensorFormatError(f"{path}: truncated header ({len(payload)} bytes)")
    header = np.frombuffer(payload[:header_size], dtype=HEADER_DTYPE)
    if int(header[0]) != magic:
        raise TensorFormatError(f"{path}: bad magic 0x{int(header[0]) & 0xFFFFFFFF:08x}")
    dims = tuple(int(d) for d in header[1:])
    if (len(payload) - header_size) % DATA_DTYPE.itemsize:
        raise TensorFormatError(f"{path}: payload is not a whole number of float32 values")
    data = np.frombuffer(payload[header_size:], dtype=DATA_DTYPE)
    return dims, data


def write_tensor(path: str, raw: NDArray[np.float64]) -> None:
    """Write a T x G x K x (C + 3) array as little-endian float32 after its header."""
    if raw.ndim != 4:
        raise TensorFormatError(f"Expected a 4-D prediction array, got shape {raw.shape}")
    _write_binary(path, TENSOR_MAGIC, raw.shape, raw)
    logger.info(f"Wrote prediction tensor {raw.shape} to {path}")


def read_tensor(
    path: str, grid: Optional[GridSpec] = None, num_classes: Optional[int] = None
) -> NDArray[np.float64]:
    """
    Load a prediction array.

    Args:
        path: Binary tensor path
        grid: When given, G in the header must equal its cell count
        num_classes: When given, the last dimension must equal C + 3

    Returns:
        Raw array of shape (T, G, K, C + 3) as float64

    Raises:
        TensorFormatError: On a bad magic, a mismatched header or a truncated payload
    """
    dims, data = _read_binary(path, TENSOR_MAGIC)
    num_frames, num_cells, num_slots, width = dims
    if min(dims) < 0 or num_slots < 1 or width < 4:
        raise TensorFormatError(f"{path}: invalid dimensions {dims}")
    if grid is not None and num_cells != grid.num_cells:
        raise TensorFormatError(f"{path}: header has G={num_cells}, grid has {grid.num_cells}")
    if num_classes is not None and width != num_classes + 3:
        raise TensorFormatError(f"{path}: header has C+3={width}, expected {num_classes + 3}")
    expected = num_frames * num_cells * num_slots * width
    if data.size != expected:
        raise TensorFormatError(f"{path}: payload holds {data.size} values, header implies {expected}")
    return data.astype(np.float64).reshape(dims)


def write_features(path: str, features: NDArray[np.float64]) -> None:
    """Write a (T, D) feature matrix; the header is (magic, T, D, 0, 0)."""
    _write_binary(path, FEATURE_MAGIC, (*features.shape, 0, 0), features)
    logger.info(f"Wrote features {features.shape} to {path}")


def read_features(path: str) -> NDArray[np.float64]:
    """
    Raises:
        TensorFormatError: On a bad magic or a truncated payload
    """
    (num_frames, dim, _, _), data = _read_binary(path, FEATURE_MAGIC)
    if data.size != num_frames * dim:
        raise TensorFormatError(f"{path}: payload holds {data.size} values, expected {num_frames * dim}")
    return data.astype(np.float64).reshape(num_frames, dim)


def write_json(path: str, document: Dict[str, Any]) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info(f"Wrote {path}")


def read_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)
