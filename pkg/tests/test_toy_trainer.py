"""
Tests for the toy head and its trainer.
"""

import numpy as np
import pytest

from src.config import Config
from src.experiment import run_demo, scene_spec_from_config
from src.loss import LossBreakdown, LossWeights
from src.simulator import SceneSimulator, SceneSpec
from src.toy_trainer import (
    EXISTENCE_PRIOR_LOGIT,
    PARAM_NAMES,
    ToyHead,
    ToyTrainer,
    TrainingDivergedError,
    head_for_scene,
    head_loss,
    train_toy,
)

THRESHOLDS = (45.0, 25.0, 10.0)


@pytest.fixture
def scene():
    return SceneSimulator(SceneSpec(num_frames=12, num_classes=2, max_polyphony=2, seed=21)).simulate()


class TestToyHead:
    """Test cases for the two-layer head."""

    def test_output_layout(self, scene):
        """The raw output has shape (T, G, K, C + 3)."""
        head = head_for_scene(scene, hidden_dim=8, num_predictions=3)
        raw, hidden = head.forward(scene.features)
        assert raw.shape == (12, 32, 3, 5)
        assert hidden.shape == (12, 8)
        assert head.predict(scene.features).num_predictions == 3

    def test_existence_prior(self, scene):
        """The existence bias starts at the silent prior."""
        head = head_for_scene(scene, hidden_dim=8, num_predictions=3)
        bias = head.params["b2"].reshape(head.output_shape)
        assert np.all(bias[..., 2] == EXISTENCE_PRIOR_LOGIT)
        assert not bias[..., :2].any()

    def test_hidden_units_start_nonlinear(self, scene):
        """Initial hidden pre-activations reach the curved part of tanh."""
        head = head_for_scene(scene, hidden_dim=64, num_predictions=3, seed=1)
        active = scene.features[np.any(scene.features != 0.0, axis=1)]
        pre = active @ head.params["w1"] + head.params["b1"]
        assert np.mean(np.abs(np.tanh(pre) - pre)) > 0.1

    def test_seeded_initialization(self, scene):
        """The same seed gives the same parameters."""
        first = head_for_scene(scene, 8, 3, seed=4)
        second = head_for_scene(scene, 8, 3, seed=4)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(first.params[name], second.params[name])

    def test_backward_matches_finite_differences(self, scene, rng):
        """Parameter gradients agree with central differences under fixed masks."""
        head = head_for_scene(scene, 8, 3, seed=2)
        params = {name: value + 0.3 * rng.standard_normal(value.shape) for name, value in head.params.items()}
        head = head.with_params(params)
        weights = LossWeights()
        _, grads, masks = head_loss(head, [scene], weights, THRESHOLDS)
        h = 1e-6
        for name in PARAM_NAMES:
            for _ in range(5):
                index = tuple(int(rng.integers(n)) for n in params[name].shape)
                plus = {k: v.copy() for k, v in params.items()}
                minus = {k: v.copy() for k, v in params.items()}
                plus[name][index] += h
                minus[name][index] -= h
                loss_plus = head_loss(head.with_params(plus), [scene], weights, THRESHOLDS, masks=masks)[0]
                loss_minus = head_loss(head.with_params(minus), [scene], weights, THRESHOLDS, masks=masks)[0]
                numeric = (loss_plus.total - loss_minus.total) / (2 * h)
                assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-7), (name, index)


class TestToyTrainer:
    """Test cases for gradient descent with backtracking."""

    def test_zero_learning_rate_keeps_the_loss(self, scene):
        """lr = 0 leaves the head and its loss unchanged."""
        head = head_for_scene(scene, 8, 3)
        result = train_toy([scene], head, epochs=5, lr=0.0)
        totals = [b.total for b in result.curve]
        assert len(totals) == 6
        assert totals == [totals[0]] * 6
        np.testing.assert_array_equal(result.head.params["w1"], head.params["w1"])

    def test_loss_decreases(self, scene):
        """Accepted steps never raise the loss, and training reduces it."""
        result = train_toy([scene], head_for_scene(scene, 16, 3), epochs=40, lr=1.0)
        totals = [b.total for b in result.curve]
        assert all(later <= earlier for earlier, later in zip(totals, totals[1:]))
        assert totals[-1] < 0.9 * totals[0]
        assert len(result.steps) == 40

    def test_deterministic(self, scene):
        """Two runs from the same seed give the same curve."""
        first = train_toy([scene], head_for_scene(scene, 8, 3, seed=1), epochs=10)
        second = train_toy([scene], head_for_scene(scene, 8, 3, seed=1), epochs=10)
        assert [b.total for b in first.curve] == [b.total for b in second.curve]

    def test_without_existence_terms(self, scene):
        """The ablation trains on classification and localization only."""
        result = train_toy([scene], head_for_scene(scene, 8, 3), epochs=5, existence_loss=False)
        assert result.curve[-1].l_pos == {}
        assert result.curve[-1].total <= result.curve[0].total

    def test_divergence_raises(self, scene, mocker):
        """A non-finite loss stops training with TrainingDivergedError."""
        head = head_for_scene(scene, 8, 3)
        grads = {name: np.zeros_like(value) for name, value in head.params.items()}
        broken = LossBreakdown(l_delta=float("nan"), total=float("nan"))
        mocker.patch("src.toy_trainer.head_loss", return_value=(broken, grads, []))
        with pytest.raises(TrainingDivergedError, match="diverged"):
            ToyTrainer().train([scene], head, epochs=3, lr=1.0)


@pytest.mark.slow
class TestDemo:
    """End-to-end runs of the desk-scale experiment."""

    def test_demo_learns_the_scene(self):
        """The default demo detects and localizes most events."""
        report = run_demo(Config()).report
        assert report.f20 >= 0.9
        assert report.le_cd is not None and report.le_cd <= 10.0

    def test_demo_handles_same_class_overlap(self):
        """With forced same-class overlap the overlap frames are still detected."""
        cfg = Config()
        spec = scene_spec_from_config(cfg, same_class_overlap_prob=1.0)
        report = run_demo(cfg, spec, overlap_only=True).report
        assert report.f20 >= 0.8


class TestToyHeadParams:
    """Test cases for explicit parameters."""

    def test_with_params_keeps_the_layout(self, scene):
        """A head built from explicit parameters keeps the dimensions."""
        head = ToyHead(8, 4, scene.references.grid, 2, 2, seed=0)
        other = head.with_params({k: np.ones_like(v) for k, v in head.params.items()})
        assert other.output_shape == head.output_shape
        assert other.params["w1"].sum() == head.params["w1"].size
