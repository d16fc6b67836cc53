"""
Tests for the loss terms, their assembly and their gradients.
"""

import math

import numpy as np
import pytest

from src.geometry import Direction, angular_distance, cell_of
from src.gradcheck import random_instance
from src.labels import PredictionTensor, ReferenceEvent, ReferenceSet, assign_responsibility
from src.loss import (
    LossBreakdown,
    LossWeights,
    bce_with_logits,
    class_loss,
    doa_loss,
    existence_losses,
    loss_value,
    total_loss,
)

THRESHOLDS = (45.0, 25.0, 10.0)
REF = Direction(22.5, 10.0)


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def single_ref_scene(grid, aim, target=REF, num_classes=1):
    """One reference at REF; every slot parked away except one aimed at target."""
    refs = ReferenceSet((ReferenceEvent(0, 0, REF),), 1, num_classes, grid)
    raw = np.zeros((1, grid.num_cells, 1, num_classes + 3))
    raw[..., num_classes + 1 :] = -50.0
    flat = cell_of(REF, grid).flat
    aim(raw, 0, flat, 0, target, grid, num_classes)
    return refs, raw, flat


def random_scene(rng, grid, num_frames=3, num_classes=3, count=5, k=3):
    events = tuple(
        ReferenceEvent(
            int(rng.integers(num_frames)),
            int(rng.integers(num_classes)),
            Direction(float(rng.uniform(-180, 180)), float(rng.uniform(-80, 80))),
        )
        for _ in range(count)
    )
    refs = ReferenceSet(events, num_frames, num_classes, grid)
    raw = rng.normal(0.0, 1.5, (num_frames, grid.num_cells, k, num_classes + 3))
    return refs, PredictionTensor(raw, grid, num_classes)


class TestBce:
    """Test cases for BCE with logits."""

    def test_matches_probability_form(self):
        """Agrees with -t log p - (1 - t) log(1 - p) for moderate logits."""
        logits = np.linspace(-6.0, 6.0, 25)
        for target in (0.0, 1.0):
            p = 1.0 / (1.0 + np.exp(-logits))
            expected = -target * np.log(p) - (1 - target) * np.log(1 - p)
            np.testing.assert_allclose(bce_with_logits(np.full(25, target), logits), expected)

    def test_large_logits_are_finite(self):
        """Saturated logits give finite values without overflow."""
        logits = np.array([-80.0, 80.0, -800.0, 800.0])
        values = bce_with_logits(np.array([1.0, 0.0, 0.0, 1.0]), logits)
        np.testing.assert_allclose(values, [80.0, 80.0, 0.0, 0.0], atol=1e-12)


class TestDoaLoss:
    """Test cases for the localization term."""

    def test_eighteen_degrees_is_one_tenth(self, grid, aim):
        """One pair 18 degrees off gives 18 / 180 = 0.1."""
        refs, raw, _ = single_ref_scene(grid, aim, Direction(22.5, 28.0))
        preds = PredictionTensor(raw, grid, 1)
        masks = assign_responsibility(refs, preds, THRESHOLDS)
        assert len(masks.pairs[45.0]) == 1
        assert doa_loss(refs, preds, masks).value == pytest.approx(0.1)

    def test_no_pairs_is_zero(self, grid):
        """Silence has no pairs and no localization loss."""
        refs = ReferenceSet((), 2, 2, grid)
        preds = PredictionTensor.zeros(2, grid, 3, 2)
        term = doa_loss(refs, preds, assign_responsibility(refs, preds, THRESHOLDS))
        assert term.value == 0.0
        assert not term.grad.any()

    def test_clamped_elevation_has_no_gradient(self, grid):
        """A slot pinned at the pole does not move in v."""
        ref = Direction(0.0, 89.0)
        refs = ReferenceSet((ReferenceEvent(0, 0, ref),), 1, 1, grid)
        raw = np.zeros((1, 32, 1, 4))
        raw[..., 2:] = -50.0
        flat = cell_of(ref, grid).flat
        raw[0, flat, 0, 2] = -1.5
        raw[0, flat, 0, 3] = 50.0
        preds = PredictionTensor(raw, grid, 1)
        term = doa_loss(refs, preds, assign_responsibility(refs, preds, THRESHOLDS))
        assert preds.slot_direction(0, flat, 0).elevation == 90.0
        assert term.value > 0.0
        assert term.grad[0, flat, 0, 3] == 0.0


class TestExistenceAndClassLoss:
    """Test cases for the existence and classification terms."""

    def test_zero_logits_give_ln2(self, grid, small_refs):
        """Every BCE term equals ln 2 at zero logits."""
        preds = PredictionTensor.zeros(2, grid, 3, 3)
        masks = assign_responsibility(small_refs, preds, THRESHOLDS)
        for tau in THRESHOLDS:
            exist = existence_losses(preds, masks, tau)
            assert exist.negative.value == pytest.approx(math.log(2))
            if masks.existence[tau].any():
                assert exist.positive.value == pytest.approx(math.log(2))
                assert class_loss(preds, masks, tau).value == pytest.approx(math.log(2))

    def test_silence_with_zero_logits(self, grid):
        """Silence scores only negatives: total = w_neg * ln 2."""
        refs = ReferenceSet((), 2, 2, grid)
        result = total_loss(refs, PredictionTensor.zeros(2, grid, 3, 2), thresholds=THRESHOLDS)
        assert result.breakdown.total == pytest.approx(5.0 * math.log(2))
        assert result.breakdown.l_pos == {45.0: 0.0, 25.0: 0.0, 10.0: 0.0}

    def test_confident_silence_is_near_zero(self, grid):
        """Strongly negative existence logits on silence give a vanishing loss."""
        refs = ReferenceSet((), 2, 2, grid)
        raw = np.zeros((2, 32, 3, 5))
        raw[..., 2] = -20.0
        result = total_loss(refs, PredictionTensor(raw, grid, 2), thresholds=THRESHOLDS)
        assert 0.0 <= result.breakdown.total < 1e-7

    def test_saturated_logits_stay_finite(self, grid, small_refs, rng):
        """Logits of magnitude 80 produce finite values and gradients."""
        raw = rng.choice([-80.0, 80.0], size=(2, 32, 3, 6))
        result = total_loss(small_refs, PredictionTensor(raw, grid, 3), thresholds=THRESHOLDS)
        assert result.breakdown.is_finite()
        assert np.all(np.isfinite(result.grad))


class TestTotalLoss:
    """Test cases for the weighted total."""

    def test_hand_computed_total(self, grid, aim):
        """One exact slot with known logits reproduces the closed form."""
        refs, raw, flat = single_ref_scene(grid, aim)
        a, b, c = 1.5, -2.0, 0.7
        raw[..., 1] = b
        raw[0, flat, 0, 1] = a
        raw[0, flat, 0, 0] = c
        breakdown = total_loss(refs, PredictionTensor(raw, grid, 1), thresholds=THRESHOLDS).breakdown
        expected = 1.0 * softplus(-a) + 5.0 * softplus(b) + 3.0 * softplus(-c)
        assert breakdown.l_delta == pytest.approx(0.0, abs=1e-6)
        assert breakdown.total == pytest.approx(expected, abs=1e-5)

    def test_total_matches_recomputed(self, grid, rng):
        """The stored total equals the total reassembled from its components."""
        refs, preds = random_scene(rng, grid)
        weights = LossWeights(2.0, 0.5, 3.0, 1.0)
        breakdown = total_loss(refs, preds, weights, THRESHOLDS).breakdown
        assert breakdown.total == pytest.approx(breakdown.recompute_total(weights))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop_oracle(self, grid, seed):
        """Every term equals an explicit loop over slots and pairs."""
        rng = np.random.default_rng(seed)
        refs, preds = random_scene(rng, grid)
        result = total_loss(refs, preds, thresholds=THRESHOLDS)
        masks = result.masks
        raw = preds.raw
        num_classes = preds.num_classes

        pairs = masks.pairs[45.0]
        distances = [
            angular_distance(
                preds.slot_direction(int(t), int(g), int(k)), refs.events[int(m)].doa
            )
            for m, t, g, k in zip(pairs.ref_index, pairs.frame, pairs.cell, pairs.slot)
        ]
        l_delta = sum(distances) / (180.0 * len(distances)) if distances else 0.0
        assert result.breakdown.l_delta == pytest.approx(l_delta)

        for tau in THRESHOLDS:
            pos, neg, cls = [], [], []
            for index in np.ndindex(*raw.shape[:3]):
                logit = raw[index][num_classes]
                if masks.existence[tau][index]:
                    pos.append(softplus(-logit))
                    for c in range(num_classes):
                        target = masks.classes[tau][index][c]
                        cls.append(softplus(-raw[index][c]) if target else softplus(raw[index][c]))
                else:
                    neg.append(softplus(logit))
            assert result.breakdown.l_pos[tau] == pytest.approx(np.mean(pos) if pos else 0.0)
            assert result.breakdown.l_neg[tau] == pytest.approx(np.mean(neg))
            assert result.breakdown.l_class[tau] == pytest.approx(np.mean(cls) if cls else 0.0)

    def test_gradient_matches_finite_differences(self, grid, rng):
        """Central differences with fixed masks agree with the analytic gradient."""
        refs, preds = random_scene(rng, grid, num_frames=2, count=4)
        weights = LossWeights()
        result = total_loss(refs, preds, weights, THRESHOLDS)
        h = 1e-6
        # one DOA entry per responsible pair plus random logits
        pairs = result.masks.pairs[45.0]
        entries = [(int(t), int(g), int(k), preds.num_classes + 1 + int(rng.integers(2)))
                   for t, g, k in zip(pairs.frame, pairs.cell, pairs.slot)]
        entries += [tuple(int(rng.integers(n)) for n in preds.raw.shape) for _ in range(20)]
        for index in entries:
            plus, minus = preds.raw.copy(), preds.raw.copy()
            plus[index] += h
            minus[index] -= h
            numeric = (
                loss_value(refs, plus, weights, THRESHOLDS, result.masks)
                - loss_value(refs, minus, weights, THRESHOLDS, result.masks)
            ) / (2 * h)
            assert result.grad[index] == pytest.approx(numeric, rel=1e-4, abs=1e-7)

    @pytest.mark.parametrize("seed", range(100))
    def test_small_step_against_the_gradient_never_increases_the_loss(self, seed):
        """Backtracking from a unit step finds a gradient step that does not raise the total."""
        rng = np.random.default_rng(seed)
        refs, raw = random_instance(rng)
        weights = LossWeights()
        preds = PredictionTensor(raw, refs.grid, refs.num_classes)
        result = total_loss(refs, preds, weights, THRESHOLDS)
        before = result.breakdown.total
        step = 1.0
        for _ in range(40):
            after = loss_value(refs, raw - step * result.grad, weights, THRESHOLDS, result.masks)
            if after <= before:
                break
            step *= 0.5
        assert after <= before + 1e-12

    def test_without_existence_terms(self, grid):
        """The ablation drops the existence terms and scores classes on every slot."""
        refs = ReferenceSet((), 2, 2, grid)
        breakdown = total_loss(
            refs, PredictionTensor.zeros(2, grid, 3, 2), thresholds=THRESHOLDS, existence_loss=False
        ).breakdown
        assert breakdown.l_pos == {} and breakdown.l_neg == {}
        assert breakdown.l_class[25.0] == pytest.approx(math.log(2))
        assert breakdown.total == pytest.approx(3.0 * math.log(2))

    def test_negative_weight_rejected(self):
        """Weights must be non-negative."""
        with pytest.raises(ValueError):
            LossWeights(w_neg=-1.0)


class TestLossBreakdown:
    """Test cases for breakdown helpers."""

    def test_average_reassembles_total(self):
        """Averaging two breakdowns averages components and recomputes the total."""
        weights = LossWeights()
        first = LossBreakdown(0.2, {45.0: 1.0}, {45.0: 0.5}, {45.0: 0.1})
        second = LossBreakdown(0.4, {45.0: 3.0}, {45.0: 1.5}, {45.0: 0.3})
        merged = LossBreakdown.average([first, second], weights)
        assert merged.l_delta == pytest.approx(0.3)
        assert merged.l_pos[45.0] == pytest.approx(2.0)
        assert merged.total == pytest.approx(5 * 0.3 + 2.0 + 5 * 1.0 + 3 * 0.2)

    def test_to_text(self):
        """One key=value line per component."""
        text = LossBreakdown(0.1, {45.0: 0.2}, {45.0: 0.3}, {45.0: 0.4}, total=1.0).to_text()
        assert text.splitlines() == [
            "l_delta=0.100000",
            "l_pos@45=0.200000",
            "l_neg@45=0.300000",
            "l_class@45=0.400000",
            "total=1.000000",
        ]
