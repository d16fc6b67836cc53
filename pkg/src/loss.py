"""
AD-YOLO loss and its analytic gradient with respect to the raw prediction tensor.

All terms use numerically stable BCE-with-logits; sets with an empty
denominator contribute zero.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, NamedTuple, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .geometry import angular_distance_deg, angular_distance_grad_deg
from .labels import (
    PredictionTensor,
    ReferenceSet,
    ResponsibilityMasks,
    assign_responsibility,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (45.0, 25.0, 10.0)


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights of the total loss."""

    w_delta: float = 5.0
    w_pos: float = 1.0
    w_neg: float = 5.0
    w_class: float = 3.0

    def __post_init__(self) -> None:
        if min(self.w_delta, self.w_pos, self.w_neg, self.w_class) < 0:
            raise ValueError(f"Loss weights must be non-negative: {self}")


class LossTerm(NamedTuple):
    """A scalar loss value with its gradient, shaped like the raw tensor."""

    value: float
    grad: NDArray[np.float64]


class ExistenceLoss(NamedTuple):
    positive: LossTerm
    negative: LossTerm


@dataclass
class LossBreakdown:
    """Components of the total loss; per-threshold terms are keyed by tau."""

    l_delta: float
    l_pos: Dict[float, float] = field(default_factory=dict)
    l_neg: Dict[float, float] = field(default_factory=dict)
    l_class: Dict[float, float] = field(default_factory=dict)
    total: float = 0.0

    def recompute_total(self, weights: LossWeights) -> float:
        """Assemble the weighted total from the stored components."""
        taus = list(self.l_class)
        per_tau = 0.0
        for tau in taus:
            per_tau += (
                weights.w_pos * self.l_pos.get(tau, 0.0)
                + weights.w_neg * self.l_neg.get(tau, 0.0)
                + weights.w_class * self.l_class[tau]
            )
        mean_tau = per_tau / len(taus) if taus else 0.0
        return weights.w_delta * self.l_delta + mean_tau

    @property
    def mean_pos(self) -> float:
        return float(np.mean(list(self.l_pos.values()))) if self.l_pos else 0.0

    @property
    def mean_neg(self) -> float:
        return float(np.mean(list(self.l_neg.values()))) if self.l_neg else 0.0

    @property
    def mean_class(self) -> float:
        return float(np.mean(list(self.l_class.values()))) if self.l_class else 0.0

    def is_finite(self) -> bool:
        values = [self.l_delta, self.total, *self.l_pos.values(), *self.l_neg.values()]
        return all(math.isfinite(v) for v in values + list(self.l_class.values()))

    @staticmethod
    def average(
        breakdowns: Sequence["LossBreakdown"], weights: LossWeights
    ) -> "LossBreakdown":
        """Component-wise mean over scenes, with the total reassembled."""
        count = len(breakdowns)
        first = breakdowns[0]

        def mean(attr: str, tau: float) -> float:
            return sum(getattr(b, attr)[tau] for b in breakdowns) / count

        merged = LossBreakdown(
            l_delta=sum(b.l_delta for b in breakdowns) / count,
            l_pos={tau: mean("l_pos", tau) for tau in first.l_pos},
            l_neg={tau: mean("l_neg", tau) for tau in first.l_neg},
            l_class={tau: mean("l_class", tau) for tau in first.l_class},
        )
        merged.total = merged.recompute_total(weights)
        return merged

    def to_text(self) -> str:
        """Flat key=value block with one line per threshold term."""
        lines = [f"l_delta={self.l_delta:.6f}"]
        for tau in self.l_class:
            if tau in self.l_pos:
                lines.append(f"l_pos@{tau:g}={self.l_pos[tau]:.6f}")
                lines.append(f"l_neg@{tau:g}={self.l_neg[tau]:.6f}")
            lines.append(f"l_class@{tau:g}={self.l_class[tau]:.6f}")
        lines.append(f"total={self.total:.6f}")
        return "\n".join(lines)

    def as_row(self) -> Dict[str, float]:
        return {
            "l_delta": self.l_delta,
            "l_pos": self.mean_pos,
            "l_neg": self.mean_neg,
            "l_class": self.mean_class,
            "total": self.total,
        }


def bce_with_logits(targets: NDArray[np.float64], logits: NDArray[np.float64]) -> NDArray[np.float64]:
    """Elementwise BCE computed from logits without forming probabilities."""
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def doa_loss(
    refs: ReferenceSet,
    preds: PredictionTensor,
    masks: ResponsibilityMasks,
    tau_max: Optional[float] = None,
) -> LossTerm:
    """
    Mean angular distance of responsible pairs, in radians divided by pi.

    Args:
        refs: Reference events
        preds: Prediction tensor the masks were built from
        masks: Responsibility masks
        tau_max: Threshold whose pairs are used (default: the largest)

    Returns:
        LossTerm: Value and gradient (non-zero only on the DOA channels)
    """
    tau = masks.thresholds[0] if tau_max is None else float(tau_max)
    pairs = masks.pairs[tau]
    grad = np.zeros_like(preds.raw)
    if len(pairs) == 0:
        return LossTerm(0.0, grad)

    decoded = preds.decoded()
    t, g, k = pairs.frame, pairs.cell, pairs.slot
    azimuth, elevation = decoded.azimuth[t, g, k], decoded.elevation[t, g, k]
    ref_az, ref_el = refs.azimuths[pairs.ref_index], refs.elevations[pairs.ref_index]

    # distance_deg / 180 == distance_rad / pi; distances follow preds, not the masks
    scale = 1.0 / (180.0 * len(pairs))
    value = float(np.sum(angular_distance_deg(azimuth, elevation, ref_az, ref_el)) * scale)
    d_az, d_el = angular_distance_grad_deg(azimuth, elevation, ref_az, ref_el)
    du = scale * d_az * decoded.d_azimuth_du[t, g, k]
    dv = scale * d_el * decoded.d_elevation_dv[t, g, k]
    u_index = preds.num_classes + 1
    # a slot may serve several references
    np.add.at(grad, (t, g, k, np.full_like(t, u_index)), du)
    np.add.at(grad, (t, g, k, np.full_like(t, u_index + 1)), dv)
    return LossTerm(value, grad)


def existence_losses(
    preds: PredictionTensor, masks: ResponsibilityMasks, tau: float
) -> ExistenceLoss:
    """
    BCE of the existence logits against the merged responsibility mask at tau.

    Returns:
        ExistenceLoss: Positive (responsible) and negative (all other) terms
    """
    logits = preds.existence_logits
    responsible = masks.existence[tau]
    probs = expit(logits)
    index = preds.existence_index

    n_pos = int(responsible.sum())
    n_neg = responsible.size - n_pos

    grad_pos = np.zeros_like(preds.raw)
    grad_neg = np.zeros_like(preds.raw)
    l_pos = l_neg = 0.0
    if n_pos:
        l_pos = float(np.sum(bce_with_logits(np.ones(n_pos), logits[responsible])) / n_pos)
        grad_pos[..., index] = np.where(responsible, (probs - 1.0) / n_pos, 0.0)
    if n_neg:
        negative = ~responsible
        l_neg = float(np.sum(bce_with_logits(np.zeros(n_neg), logits[negative])) / n_neg)
        grad_neg[..., index] = np.where(negative, probs / n_neg, 0.0)
    return ExistenceLoss(LossTerm(l_pos, grad_pos), LossTerm(l_neg, grad_neg))


def class_loss(
    preds: PredictionTensor,
    masks: ResponsibilityMasks,
    tau: float,
    responsible_only: bool = True,
) -> LossTerm:
    """
    Class-wise BCE over the unique responsible slots at tau.

    With responsible_only=False every slot is scored (non-responsible slots
    have all-zero targets), which is the variant trained without existence terms.
    """
    targets = masks.classes[tau]
    logits = preds.class_logits
    grad = np.zeros_like(preds.raw)
    if responsible_only:
        selected = masks.existence[tau]
    else:
        selected = np.ones(targets.shape[:3], dtype=bool)
    count = int(selected.sum())
    if count == 0:
        return LossTerm(0.0, grad)

    denominator = preds.num_classes * count
    value = float(
        np.sum(bce_with_logits(targets[selected].astype(np.float64), logits[selected]))
        / denominator
    )
    residual = (expit(logits) - targets) / denominator
    grad[..., : preds.num_classes] = np.where(selected[..., None], residual, 0.0)
    return LossTerm(value, grad)


class TotalLoss(NamedTuple):
    breakdown: LossBreakdown
    grad: NDArray[np.float64]
    masks: ResponsibilityMasks


def total_loss(
    refs: ReferenceSet,
    preds: PredictionTensor,
    weights: Optional[LossWeights] = None,
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    masks: Optional[ResponsibilityMasks] = None,
    existence_loss: bool = True,
) -> TotalLoss:
    """
    Assemble the weighted loss over every threshold.

    total = w_delta * l_delta(max tau) + mean over tau of
            (w_pos * l_pos + w_neg * l_neg + w_class * l_class)

    Args:
        refs: Reference events
        preds: Prediction tensor
        weights: Loss weights (default 5, 1, 5, 3)
        thresholds: Responsibility thresholds in degrees
        masks: Precomputed masks; holding them fixed makes the loss smooth
            in the raw tensor, which the finite-difference checks rely on
        existence_loss: False drops the existence terms and scores classes
            on every slot

    Returns:
        TotalLoss: Breakdown, gradient and the masks used
    """
    weights = weights or LossWeights()
    if masks is None:
        masks = assign_responsibility(refs, preds, thresholds)
    taus = masks.thresholds

    l_delta = doa_loss(refs, preds, masks, taus[0])
    breakdown = LossBreakdown(l_delta=l_delta.value)
    grad = weights.w_delta * l_delta.grad
    per_tau_grad = np.zeros_like(preds.raw)
    for tau in taus:
        if existence_loss:
            exist = existence_losses(preds, masks, tau)
            breakdown.l_pos[tau] = exist.positive.value
            breakdown.l_neg[tau] = exist.negative.value
            per_tau_grad += weights.w_pos * exist.positive.grad
            per_tau_grad += weights.w_neg * exist.negative.grad
        cls = class_loss(preds, masks, tau, responsible_only=existence_loss)
        breakdown.l_class[tau] = cls.value
        per_tau_grad += weights.w_class * cls.grad
    grad = grad + per_tau_grad / len(taus)
    breakdown.total = breakdown.recompute_total(weights)
    return TotalLoss(breakdown, grad, masks)


def loss_value(
    refs: ReferenceSet,
    raw: NDArray[np.float64],
    weights: LossWeights,
    thresholds: Iterable[float],
    masks: Optional[ResponsibilityMasks] = None,
    existence_loss: bool = True,
) -> float:
    """Total loss of a raw array; convenience for line searches and finite differences."""
    preds = PredictionTensor(raw, refs.grid, refs.num_classes)
    return total_loss(refs, preds, weights, thresholds, masks, existence_loss).breakdown.total

