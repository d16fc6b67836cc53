"""
Toy prediction head trained with the AD-YOLO loss.

Two dense layers map per-frame features to a prediction tensor; gradients of
the loss are back-propagated by hand and applied by full-batch gradient
descent with a backtracking (Armijo) line search.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from .geometry import GridSpec
from .labels import PredictionTensor, ResponsibilityMasks
from .loss import DEFAULT_THRESHOLDS, LossBreakdown, LossWeights, total_loss
from .simulator import Scene

logger = logging.getLogger(__name__)

Params = Dict[str, NDArray[np.float64]]
PARAM_NAMES = ("w1", "b1", "w2", "b2")

# Initial existence bias: sigmoid(-4) ~ 0.018, most slots start as "silent"
EXISTENCE_PRIOR_LOGIT: float = -4.0

# Input weight scale; hidden pre-activations start at unit order
INPUT_WEIGHT_SCALE: float = 1.0


class TrainingDivergedError(RuntimeError):
    """The training loss became NaN or infinite."""


class ToyHead:
    """
    Two dense layers with a tanh hidden activation.

    Output of width G * K * (C + 3) is reshaped to the prediction tensor layout.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int,
        grid: GridSpec,
        num_predictions: int,
        num_classes: int,
        seed: int = 0,
        params: Optional[Params] = None,
    ):
        """
        Initialize the head.

        Args:
            input_dim: Feature dimension d_in
            hidden_dim: Hidden dimension d
            grid: Grid the predictions are anchored to
            num_predictions: Predictions per cell K
            num_classes: Number of classes C
            seed: Seed for weight initialization
            params: Explicit parameters instead of a random initialization
        """
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.grid = grid
        self.num_predictions = num_predictions
        self.num_classes = num_classes
        self.seed = seed
        self.params = params if params is not None else self._initial_params(seed)

    @property
    def output_dim(self) -> int:
        return self.grid.num_cells * self.num_predictions * (self.num_classes + 3)

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        return self.grid.num_cells, self.num_predictions, self.num_classes + 3

    def _initial_params(self, seed: int) -> Params:
        rng = np.random.default_rng(seed)
        b2 = np.zeros(self.output_shape)
        b2[..., self.num_classes] = EXISTENCE_PRIOR_LOGIT
        return {
            "w1": INPUT_WEIGHT_SCALE * rng.standard_normal((self.input_dim, self.hidden_dim)),
            "b1": rng.uniform(-1.0, 1.0, self.hidden_dim),
            "w2": 0.01 * rng.standard_normal((self.hidden_dim, self.output_dim)),
            "b2": b2.reshape(-1),
        }

    def with_params(self, params: Params) -> "ToyHead":
        return ToyHead(
            self.input_dim,
            self.hidden_dim,
            self.grid,
            self.num_predictions,
            self.num_classes,
            self.seed,
            params,
        )

    def forward(
        self, features: NDArray[np.float64]
    ) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """
        Compute the raw prediction array.

        Returns:
            Tuple of the raw array (T, G, K, C + 3) and the hidden activations
        """
        hidden = np.tanh(features @ self.params["w1"] + self.params["b1"])
        output = hidden @ self.params["w2"] + self.params["b2"]
        return output.reshape((features.shape[0],) + self.output_shape), hidden

    def predict(self, features: NDArray[np.float64]) -> PredictionTensor:
        raw, _ = self.forward(features)
        return PredictionTensor(raw, self.grid, self.num_classes)

    def backward(
        self,
        features: NDArray[np.float64],
        hidden: NDArray[np.float64],
        grad_raw: NDArray[np.float64],
    ) -> Params:
        """Back-propagate a gradient w.r.t. the raw output to every parameter."""
        grad_out = grad_raw.reshape(features.shape[0], -1)
        grad_hidden = grad_out @ self.params["w2"].T
        grad_pre = grad_hidden * (1.0 - hidden**2)
        return {
            "w1": features.T @ grad_pre,
            "b1": grad_pre.sum(axis=0),
            "w2": hidden.T @ grad_out,
            "b2": grad_out.sum(axis=0),
        }


@dataclass
class TrainingResult:
    """Trained head and its per-epoch loss curve (entry 0 is the initial loss)."""

    head: ToyHead
    curve: List[LossBreakdown] = field(default_factory=list)
    steps: List[float] = field(default_factory=list)


def head_loss(
    head: ToyHead,
    scenes: Sequence[Scene],
    weights: LossWeights,
    thresholds: Iterable[float],
    existence_loss: bool = True,
    masks: Optional[Sequence[ResponsibilityMasks]] = None,
) -> Tuple[LossBreakdown, Params, List[ResponsibilityMasks]]:
    """
    Mean loss over scenes and its gradient w.r.t. the head parameters.

    Args:
        head: Toy head
        scenes: Training scenes
        weights: Loss weights
        thresholds: Responsibility thresholds
        existence_loss: Whether existence terms are trained
        masks: Optional fixed masks per scene

    Returns:
        Averaged breakdown, parameter gradients, and the masks used per scene
    """
    taus = tuple(thresholds)
    breakdowns = []
    used_masks = []
    grads = {name: np.zeros_like(value) for name, value in head.params.items()}
    for index, scene in enumerate(scenes):
        raw, hidden = head.forward(scene.features)
        preds = PredictionTensor(raw, head.grid, head.num_classes)
        fixed = masks[index] if masks is not None else None
        result = total_loss(scene.references, preds, weights, taus, fixed, existence_loss)
        breakdowns.append(result.breakdown)
        used_masks.append(result.masks)
        for name, grad in head.backward(scene.features, hidden, result.grad).items():
            grads[name] += grad / len(scenes)
    return LossBreakdown.average(breakdowns, weights), grads, used_masks


class ToyTrainer:
    """Full-batch gradient descent with an Armijo backtracking line search."""

    def __init__(
        self,
        weights: Optional[LossWeights] = None,
        thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
        existence_loss: bool = True,
        armijo: float = 1e-4,
        growth: float = 1.5,
        max_backtracks: int = 30,
    ):
        """
        Initialize the trainer.

        Args:
            weights: Loss weights
            thresholds: Responsibility thresholds in degrees
            existence_loss: Whether existence terms are trained
            armijo: Sufficient-decrease constant
            growth: Step multiplier after an accepted step
            max_backtracks: Step halvings tried before an epoch is skipped
        """
        self.weights = weights or LossWeights()
        self.thresholds = tuple(thresholds)
        self.existence_loss = existence_loss
        self.armijo = armijo
        self.growth = growth
        self.max_backtracks = max_backtracks

    def _objective(self, head: ToyHead, scenes: Sequence[Scene]) -> LossBreakdown:
        breakdown, _, _ = head_loss(
            head, scenes, self.weights, self.thresholds, self.existence_loss
        )
        return breakdown

    def train(
        self, scenes: Sequence[Scene], head: ToyHead, epochs: int, lr: float
    ) -> TrainingResult:
        """
        Train the head.

        Args:
            scenes: Training scenes (full batch)
            head: Initial head
            epochs: Number of descent steps
            lr: Initial step size; 0 leaves the head unchanged

        Returns:
            TrainingResult: Trained head, loss curve and accepted step sizes

        Raises:
            TrainingDivergedError: If the loss becomes non-finite
        """
        breakdown, grads, _ = head_loss(
            head, scenes, self.weights, self.thresholds, self.existence_loss
        )
        self._check(breakdown, 0, lr)
        result = TrainingResult(head=head, curve=[breakdown])
        step = lr
        for epoch in range(1, epochs + 1):
            sq_norm = sum(float(np.sum(g**2)) for g in grads.values())
            accepted = None
            trial = step
            for _ in range(self.max_backtracks + 1):
                candidate = head.with_params(
                    {name: head.params[name] - trial * grads[name] for name in PARAM_NAMES}
                )
                trial_breakdown = self._objective(candidate, scenes)
                self._check(trial_breakdown, epoch, trial)
                if trial_breakdown.total <= breakdown.total - self.armijo * trial * sq_norm:
                    accepted = (candidate, trial)
                    break
                trial *= 0.5
            if accepted is None:
                logger.debug(f"Epoch {epoch}: no step satisfied the line search")
                result.steps.append(0.0)
                result.curve.append(breakdown)
                continue

            head, step = accepted[0], accepted[1] * self.growth
            breakdown, grads, _ = head_loss(
                head, scenes, self.weights, self.thresholds, self.existence_loss
            )
            result.steps.append(accepted[1])
            result.curve.append(breakdown)
            if epoch % 100 == 0 or epoch == epochs:
                logger.info(f"Epoch {epoch}/{epochs}: total={breakdown.total:.5f} step={accepted[1]:.3g}")
        result.head = head
        return result

    @staticmethod
    def _check(breakdown: LossBreakdown, epoch: int, step: float) -> None:
        if not breakdown.is_finite():
            message = (
                f"Training diverged at epoch {epoch} (step {step:.3g}): "
                f"l_delta={breakdown.l_delta}, total={breakdown.total}"
            )
            logger.error(message)
            raise TrainingDivergedError(message)


def train_toy(
    scenes: Sequence[Scene],
    head: ToyHead,
    weights: Optional[LossWeights] = None,
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    epochs: int = 3000,
    lr: float = 1.0,
    existence_loss: bool = True,
) -> TrainingResult:
    """Train a toy head on scenes; see ToyTrainer.train."""
    trainer = ToyTrainer(weights, thresholds, existence_loss)
    return trainer.train(scenes, head, epochs, lr)


def head_for_scene(
    scene: Scene, hidden_dim: int, num_predictions: int, seed: int = 0
) -> ToyHead:
    """A freshly initialized head sized for a scene."""
    return ToyHead(
        input_dim=scene.features.shape[1],
        hidden_dim=hidden_dim,
        grid=scene.references.grid,
        num_predictions=num_predictions,
        num_classes=scene.references.num_classes,
        seed=seed,
    )
