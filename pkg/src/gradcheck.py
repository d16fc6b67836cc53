"""
Finite-difference checks of the analytic loss gradients.

Every loss term is compared against central differences on seeded random
instances with the responsibility masks held fixed; the toy head's
back-propagation is checked the same way on its parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .geometry import Direction, GridSpec
from .labels import (
    PredictionTensor,
    ReferenceEvent,
    ReferenceSet,
    ResponsibilityMasks,
    assign_responsibility,
)
from .loss import (
    DEFAULT_THRESHOLDS,
    LossTerm,
    LossWeights,
    class_loss,
    doa_loss,
    existence_losses,
    total_loss,
)
from .simulator import Scene, SceneSpec, scene_features
from .toy_trainer import PARAM_NAMES, ToyHead, head_loss

logger = logging.getLogger(__name__)

GRADIENT_STEP: float = 1e-5
RELATIVE_FLOOR: float = 1e-5
DEFAULT_TOLERANCE: float = 1e-4

# Entries closer than this to a kink of the loss are not compared
ELEVATION_MARGIN_DEG: float = 1e-3
DISTANCE_MARGIN_DEG: float = 0.5

MAX_FRAMES = 4
MAX_CLASSES = 5
NUM_PREDICTIONS = 3
HEAD_HIDDEN_DIM = 8

TermFunction = Callable[[NDArray[np.float64]], LossTerm]


@dataclass
class SuiteResult:
    """Worst relative error of one gradient suite."""

    name: str
    max_relative_error: float = 0.0
    checked: int = 0
    skipped: int = 0

    def record(self, errors: Iterable[float], skipped: int = 0) -> None:
        for error in errors:
            self.max_relative_error = max(self.max_relative_error, error)
            self.checked += 1
        self.skipped += skipped


@dataclass
class GradCheckReport:
    """Results of every suite."""

    seed: int
    instances: int
    suites: Dict[str, SuiteResult] = field(default_factory=dict)

    def suite(self, name: str) -> SuiteResult:
        return self.suites.setdefault(name, SuiteResult(name))

    @property
    def max_relative_error(self) -> float:
        return max((s.max_relative_error for s in self.suites.values()), default=0.0)

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_relative_error < tolerance

    def to_text(self) -> str:
        lines = [
            f"{name}: max_rel_error={s.max_relative_error:.3e} checked={s.checked} skipped={s.skipped}"
            for name, s in sorted(self.suites.items())
        ]
        lines.append(f"max_relative_error={self.max_relative_error:.3e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_difference(
    f: Callable[[NDArray[np.float64]], float],
    x: NDArray[np.float64],
    index: Tuple[int, ...],
    step: float = GRADIENT_STEP,
) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for one entry of x."""
    shifted = x.copy()
    shifted[index] = x[index] + step
    upper = f(shifted)
    shifted[index] = x[index] - step
    lower = f(shifted)
    return (upper - lower) / (2.0 * step)


def random_direction(rng: np.random.Generator) -> Direction:
    """Uniform direction on the sphere."""
    azimuth = rng.uniform(-180.0, 180.0)
    elevation = float(np.degrees(np.arcsin(rng.uniform(-1.0, 1.0))))
    return Direction(azimuth, elevation)


def random_instance(
    rng: np.random.Generator, grid: Optional[GridSpec] = None
) -> Tuple[ReferenceSet, NDArray[np.float64]]:
    """
    A random reference set and raw tensor with T <= 4, K = 3, C <= 5.

    Every frame holds zero to three events; at least one event exists.
    """
    grid = grid or GridSpec()
    num_frames = int(rng.integers(1, MAX_FRAMES + 1))
    num_classes = int(rng.integers(1, MAX_CLASSES + 1))
    events: List[ReferenceEvent] = []
    for frame in range(num_frames):
        for _ in range(int(rng.integers(0, 4))):
            events.append(
                ReferenceEvent(frame, int(rng.integers(num_classes)), random_direction(rng))
            )
    if not events:
        events.append(ReferenceEvent(0, 0, random_direction(rng)))
    refs = ReferenceSet(tuple(events), num_frames, num_classes, grid)
    raw = rng.normal(0.0, 1.5, (num_frames, grid.num_cells, NUM_PREDICTIONS, num_classes + 3))
    return refs, raw


def kink_slots(preds: PredictionTensor, masks: ResponsibilityMasks) -> NDArray[np.bool_]:
    """
    Slots whose loss is not smooth within a finite-difference step.

    Those are slots whose unclamped elevation sits at a pole, and slots of a
    responsible pair whose distance is close to 0 or 180 degrees.
    """
    grid = preds.grid
    _, center_el = grid.cell_centers()
    v = preds.raw[..., preds.num_classes + 2]
    raw_el = center_el[None, :, None] + (expit(v) - 0.5) * grid.lat_reach
    near = np.abs(np.abs(raw_el) - 90.0) < ELEVATION_MARGIN_DEG
    for tau in masks.thresholds:
        pairs = masks.pairs[tau]
        close = (pairs.distance < DISTANCE_MARGIN_DEG) | (
            pairs.distance > 180.0 - DISTANCE_MARGIN_DEG
        )
        near[pairs.frame[close], pairs.cell[close], pairs.slot[close]] = True
    return near


def term_functions(
    refs: ReferenceSet,
    masks: ResponsibilityMasks,
    weights: LossWeights,
) -> Dict[str, TermFunction]:
    """Every loss term as a function of the raw array, with masks held fixed."""
    grid, num_classes = refs.grid, refs.num_classes

    def wrap(raw: NDArray[np.float64]) -> PredictionTensor:
        return PredictionTensor(raw, grid, num_classes)

    functions: Dict[str, TermFunction] = {
        "l_delta": lambda raw: doa_loss(refs, wrap(raw), masks),
    }
    for tau in masks.thresholds:
        functions[f"l_pos@{tau:g}"] = lambda raw, tau=tau: existence_losses(
            wrap(raw), masks, tau
        ).positive
        functions[f"l_neg@{tau:g}"] = lambda raw, tau=tau: existence_losses(
            wrap(raw), masks, tau
        ).negative
        functions[f"l_class@{tau:g}"] = lambda raw, tau=tau: class_loss(wrap(raw), masks, tau)
        functions[f"l_class_all@{tau:g}"] = lambda raw, tau=tau: class_loss(
            wrap(raw), masks, tau, responsible_only=False
        )

    def total(raw: NDArray[np.float64], existence: bool) -> LossTerm:
        result = total_loss(refs, wrap(raw), weights, masks.thresholds, masks, existence)
        return LossTerm(result.breakdown.total, result.grad)

    functions["total"] = lambda raw: total(raw, True)
    functions["total_without_existence"] = lambda raw: total(raw, False)
    return functions


def sample_entries(
    rng: np.random.Generator, grad: NDArray[np.float64], count: int
) -> List[Tuple[int, ...]]:
    """Half the entries drawn where the gradient is non-zero, the rest anywhere."""
    flat = grad.reshape(-1)
    nonzero = np.flatnonzero(flat)
    chosen: List[int] = []
    if nonzero.size:
        chosen.extend(rng.choice(nonzero, size=min(count // 2, nonzero.size), replace=False))
    chosen.extend(rng.integers(flat.size, size=count - len(chosen)))
    return [tuple(int(i) for i in np.unravel_index(c, grad.shape)) for c in chosen]


class GradientChecker:
    """Runs the finite-difference suites on seeded random instances."""

    def __init__(
        self,
        seed: int = 0,
        instances: int = 100,
        entries: int = 20,
        step: float = GRADIENT_STEP,
        weights: Optional[LossWeights] = None,
        thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
        grid: Optional[GridSpec] = None,
    ):
        """
        Initialize the checker.

        Args:
            seed: Seed of the instance generator
            instances: Number of random instances
            entries: Entries compared per term and instance
            step: Central-difference step
            weights: Loss weights of the total
            thresholds: Responsibility thresholds in degrees
            grid: Grid of the random instances
        """
        self.seed = seed
        self.instances = instances
        self.entries = entries
        self.step = step
        self.weights = weights or LossWeights()
        self.thresholds = tuple(thresholds)
        self.grid = grid or GridSpec()

    def run(self, include_head: bool = True) -> GradCheckReport:
        """
        Check every loss term, and the toy head when include_head is set.

        Returns:
            GradCheckReport: Worst relative error per suite
        """
        rng = np.random.default_rng(self.seed)
        report = GradCheckReport(self.seed, self.instances)
        for _ in range(self.instances):
            refs, raw = random_instance(rng, self.grid)
            self.check_terms(refs, raw, rng, report)
            if include_head:
                self.check_head(refs, rng, report)
        logger.info(
            f"Gradient check over {self.instances} instances (seed={self.seed}): "
            f"max relative error {report.max_relative_error:.3e}"
        )
        return report

    def check_terms(
        self,
        refs: ReferenceSet,
        raw: NDArray[np.float64],
        rng: np.random.Generator,
        report: GradCheckReport,
    ) -> None:
        preds = PredictionTensor(raw, refs.grid, refs.num_classes)
        masks = assign_responsibility(refs, preds, self.thresholds)
        kinks = kink_slots(preds, masks)
        for name, function in term_functions(refs, masks, self.weights).items():
            analytic = function(raw).grad
            errors = []
            skipped = 0
            for index in sample_entries(rng, analytic, self.entries):
                if kinks[index[:3]]:
                    skipped += 1
                    continue
                numeric = central_difference(lambda x: function(x).value, raw, index, self.step)
                errors.append(relative_error(float(analytic[index]), numeric))
            if skipped:
                logger.warning(f"{name}: skipped {skipped} entries next to a kink")
            report.suite(name.split("@")[0]).record(errors, skipped)

    def check_head(
        self, refs: ReferenceSet, rng: np.random.Generator, report: GradCheckReport
    ) -> None:
        """Compare the head's parameter gradients with central differences."""
        scene = Scene(
            SceneSpec(num_frames=refs.num_frames, num_classes=refs.num_classes, grid=refs.grid),
            refs,
            scene_features(refs, noise_amplitude=0.1, seed=int(rng.integers(2**31))),
        )
        head = ToyHead(
            input_dim=scene.features.shape[1],
            hidden_dim=HEAD_HIDDEN_DIM,
            grid=refs.grid,
            num_predictions=NUM_PREDICTIONS,
            num_classes=refs.num_classes,
        )
        head = head.with_params(
            {name: rng.normal(0.0, 0.5, value.shape) for name, value in head.params.items()}
        )
        _, grads, masks = head_loss(head, [scene], self.weights, self.thresholds)
        raw, _ = head.forward(scene.features)
        if kink_slots(PredictionTensor(raw, refs.grid, refs.num_classes), masks[0]).any():
            report.suite("head").record([], skipped=1)
            logger.warning("head: instance skipped, a slot sits next to a kink")
            return

        suite = report.suite("head")
        for name in PARAM_NAMES:

            def objective(value: NDArray[np.float64], name: str = name) -> float:
                params = dict(head.params)
                params[name] = value
                breakdown, _, _ = head_loss(
                    head.with_params(params), [scene], self.weights, self.thresholds, masks=masks
                )
                return breakdown.total

            errors = []
            for index in sample_entries(rng, grads[name], max(2, self.entries // 4)):
                numeric = central_difference(objective, head.params[name], index, self.step)
                errors.append(relative_error(float(grads[name][index]), numeric))
            suite.record(errors)


def run_gradcheck(
    seed: int = 0,
    instances: int = 100,
    entries: int = 20,
    weights: Optional[LossWeights] = None,
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    grid: Optional[GridSpec] = None,
) -> GradCheckReport:
    """Run every gradient suite; see GradientChecker."""
    checker = GradientChecker(seed, instances, entries, weights=weights, thresholds=thresholds, grid=grid)
    return checker.run()
