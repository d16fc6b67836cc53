"""
Joint localization and detection metrics for SELD output.

Location-sensitive detection (ER and F within 20 degrees) and class-sensitive
localization (LE and LR) are counted per frame and class with Hungarian
matching on angular distance, pooled per one-second segment, then
micro-aggregated over the whole input.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .decoder import Detection
from .geometry import angular_distance_deg
from .labels import ReferenceEvent, ReferenceSet

logger = logging.getLogger(__name__)

# Stand-in for an undefined localization error inside the aggregate score
UNDEFINED_LE_PENALTY: float = 180.0


@dataclass(frozen=True)
class MatchResult:
    """Hungarian matching of one frame and class."""

    pairs: Tuple[Tuple[int, int, float], ...]
    unmatched_detections: Tuple[int, ...]
    unmatched_references: Tuple[int, ...]


@dataclass
class MatchCounts:
    """Raw counts behind every metric."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    num_references: int = 0
    num_detections: int = 0
    matched_pairs: int = 0
    matched_distance: float = 0.0

    def add(self, other: "MatchCounts") -> None:
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def as_dict(self) -> Dict[str, Any]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
            "num_references": self.num_references,
            "num_detections": self.num_detections,
            "matched_pairs": self.matched_pairs,
        }


@dataclass
class MetricsReport:
    """
    Evaluation result.

    le_cd is None when no detection was class-matched; the aggregate score
    then substitutes 180 degrees. er20 is math.inf when there are no
    references but some detections.
    """

    er20: float
    f20: float
    le_cd: Optional[float]
    lr_cd: float
    seld_error: float
    counts: MatchCounts = field(default_factory=MatchCounts)
    delta_seld_error: Optional[float] = None

    def as_document(self) -> Dict[str, Any]:
        """Machine-readable document; non-finite values are written as strings."""
        document: Dict[str, Any] = {
            "er20": _json_number(self.er20),
            "f20": self.f20,
            "le_cd_deg": self.le_cd,
            "lr_cd": self.lr_cd,
            "seld_error": _json_number(self.seld_error),
            "counts": self.counts.as_dict(),
        }
        if self.delta_seld_error is not None:
            document["delta_seld_error"] = _json_number(self.delta_seld_error)
        return document

    def to_text(self) -> str:
        """Flat key=value block."""
        le = "undefined" if self.le_cd is None else f"{self.le_cd:.4f}"
        lines = [
            f"er20={self.er20:.4f}",
            f"f20={self.f20:.4f}",
            f"le_cd_deg={le}",
            f"lr_cd={self.lr_cd:.4f}",
            f"seld_error={self.seld_error:.4f}",
        ]
        if self.delta_seld_error is not None:
            lines.append(f"delta_seld_error={self.delta_seld_error:+.4f}")
        return "\n".join(lines)


def _json_number(value: float) -> Any:
    return value if math.isfinite(value) else str(value)


def seld_error(er20: float, f20: float, le_cd: Optional[float], lr_cd: float) -> float:
    """Mean of ER, 1 - F, 1 - LR and LE / 180; an undefined LE counts as 180."""
    le = UNDEFINED_LE_PENALTY if le_cd is None else le_cd
    return (er20 + (1.0 - f20) + (1.0 - lr_cd) + le / 180.0) / 4.0


def match_per_class(
    dets: Sequence[Detection],
    refs: Sequence[ReferenceEvent],
    frame: Optional[int] = None,
    class_id: Optional[int] = None,
) -> MatchResult:
    """
    Minimum-total-distance assignment between detections and references.

    Inputs are filtered to the given frame and class when those are passed;
    indices in the result refer to positions in the filtered sequences.
    """
    if frame is not None or class_id is not None:
        dets = [
            d
            for d in dets
            if (frame is None or d.frame == frame) and (class_id is None or d.class_id == class_id)
        ]
        refs = [
            r
            for r in refs
            if (frame is None or r.frame == frame) and (class_id is None or r.class_id == class_id)
        ]
    if not dets or not refs:
        return MatchResult((), tuple(range(len(dets))), tuple(range(len(refs))))

    cost = angular_distance_deg(
        np.array([d.doa.azimuth for d in dets])[:, None],
        np.array([d.doa.elevation for d in dets])[:, None],
        np.array([r.doa.azimuth for r in refs])[None, :],
        np.array([r.doa.elevation for r in refs])[None, :],
    )
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple((int(r), int(c), float(cost[r, c])) for r, c in zip(rows, cols))
    matched_dets, matched_refs = set(rows.tolist()), set(cols.tolist())
    return MatchResult(
        pairs,
        tuple(i for i in range(len(dets)) if i not in matched_dets),
        tuple(j for j in range(len(refs)) if j not in matched_refs),
    )


def location_sensitive_detection(
    matches: Iterable[MatchResult], doa_threshold: float = 20.0
) -> MatchCounts:
    """
    Count TP/FP/FN of one segment and derive its S, D and I.

    Matched pairs closer than the threshold are true positives; farther
    pairs count as both a false positive and a false negative.
    """
    counts = MatchCounts()
    for match in matches:
        for _, _, distance in match.pairs:
            if distance < doa_threshold:
                counts.tp += 1
            else:
                counts.fp += 1
                counts.fn += 1
        counts.fp += len(match.unmatched_detections)
        counts.fn += len(match.unmatched_references)
        counts.num_references += len(match.pairs) + len(match.unmatched_references)
        counts.num_detections += len(match.pairs) + len(match.unmatched_detections)
    counts.substitutions = min(counts.fn, counts.fp)
    counts.deletions = max(0, counts.fn - counts.fp)
    counts.insertions = max(0, counts.fp - counts.fn)
    return counts


def class_sensitive_localization(matches: Iterable[MatchResult]) -> MatchCounts:
    """Count class-matched pairs and their summed distance, with no distance gate."""
    counts = MatchCounts()
    for match in matches:
        counts.matched_pairs += len(match.pairs)
        counts.matched_distance += sum(distance for _, _, distance in match.pairs)
        counts.num_references += len(match.pairs) + len(match.unmatched_references)
    return counts


def overlap_frames(refs: ReferenceSet) -> List[int]:
    """Frames where some class has two or more simultaneous references."""
    seen: Dict[Tuple[int, int], int] = {}
    for event in refs.events:
        key = (event.frame, event.class_id)
        seen[key] = seen.get(key, 0) + 1
    return sorted({frame for (frame, _), count in seen.items() if count >= 2})


class SELDEvaluator:
    """Evaluates detections against references."""

    def __init__(self, labels_per_second: int = 10, doa_threshold: float = 20.0):
        """
        Initialize the evaluator.

        Args:
            labels_per_second: Frames per one-second segment
            doa_threshold: Location-sensitive gate in degrees
        """
        if labels_per_second < 1:
            raise ValueError("labels_per_second must be >= 1")
        self.labels_per_second = labels_per_second
        self.doa_threshold = doa_threshold

    def evaluate(
        self,
        detections: Sequence[Detection],
        refs: ReferenceSet,
        frames: Optional[Iterable[int]] = None,
    ) -> MetricsReport:
        """
        Compute every metric.

        Args:
            detections: Decoded detections
            refs: Reference events
            frames: Optional subset of frames to evaluate

        Returns:
            MetricsReport: Metrics and counts
        """
        keep = None if frames is None else set(frames)
        # canonical order keeps results independent of input order
        dets = sorted(
            (d for d in detections if keep is None or d.frame in keep),
            key=lambda d: (d.frame, d.class_id, d.doa.azimuth, d.doa.elevation, d.score),
        )
        events = [e for e in refs.events if keep is None or e.frame in keep]

        by_key_dets: Dict[Tuple[int, int], List[Detection]] = {}
        by_key_refs: Dict[Tuple[int, int], List[ReferenceEvent]] = {}
        for d in dets:
            by_key_dets.setdefault((d.frame, d.class_id), []).append(d)
        for e in events:
            by_key_refs.setdefault((e.frame, e.class_id), []).append(e)

        segments: Dict[int, List[MatchResult]] = {}
        for key in sorted(set(by_key_dets) | set(by_key_refs)):
            match = match_per_class(by_key_dets.get(key, []), by_key_refs.get(key, []))
            segments.setdefault(key[0] // self.labels_per_second, []).append(match)

        totals = MatchCounts()
        for segment in sorted(segments):
            detection = location_sensitive_detection(segments[segment], self.doa_threshold)
            localization = class_sensitive_localization(segments[segment])
            detection.matched_pairs = localization.matched_pairs
            detection.matched_distance = localization.matched_distance
            totals.add(detection)

        report = self._report(totals)
        logger.info(
            f"Evaluated {totals.num_detections} detections against "
            f"{totals.num_references} references: seld_error={report.seld_error:.4f}"
        )
        return report

    def evaluate_overlap(
        self, detections: Sequence[Detection], refs: ReferenceSet
    ) -> MetricsReport:
        """Evaluate only same-class overlap frames and report the change from all frames."""
        overall = self.evaluate(detections, refs)
        subset = self.evaluate(detections, refs, frames=overlap_frames(refs))
        subset.delta_seld_error = subset.seld_error - overall.seld_error
        return subset

    @staticmethod
    def _report(counts: MatchCounts) -> MetricsReport:
        errors = counts.substitutions + counts.deletions + counts.insertions
        if counts.num_references:
            er20 = errors / counts.num_references
        else:
            er20 = 0.0 if counts.num_detections == 0 else math.inf

        f_denominator = 2 * counts.tp + counts.fp + counts.fn
        f20 = 2 * counts.tp / f_denominator if f_denominator else 1.0

        le_cd = (
            counts.matched_distance / counts.matched_pairs if counts.matched_pairs else None
        )
        lr_cd = counts.matched_pairs / counts.num_references if counts.num_references else 1.0
        return MetricsReport(
            er20=er20,
            f20=f20,
            le_cd=le_cd,
            lr_cd=lr_cd,
            seld_error=seld_error(er20, f20, le_cd, lr_cd),
            counts=counts,
        )
