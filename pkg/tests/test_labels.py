"""
Tests for reference sets, the prediction tensor layout and responsibility assignment.
"""

import numpy as np
import pytest

from src.config import ConfigurationError
from src.geometry import (
    Direction,
    GridSpec,
    angular_distance,
    cell_of,
    extended_cells_of,
    wrap_azimuth,
)
from src.labels import (
    PredictionTensor,
    ReferenceEvent,
    ReferenceSet,
    RowValidationError,
    assign_responsibility,
    decode_doa,
    events_to_reference_set,
)

THRESHOLDS = (45.0, 25.0, 10.0)


def random_refs(rng, num_frames, num_classes, count, grid):
    events = []
    for _ in range(count):
        direction = Direction(
            float(rng.uniform(-180.0, 180.0)), float(np.degrees(np.arcsin(rng.uniform(-1, 1))))
        )
        events.append(
            ReferenceEvent(int(rng.integers(num_frames)), int(rng.integers(num_classes)), direction)
        )
    return ReferenceSet(tuple(events), num_frames, num_classes, grid)


class TestDecodeDoa:
    """Test cases for the slot DOA parametrization."""

    def test_zero_raw_is_cell_center(self, grid):
        """sigmoid(0) = 0.5 puts the slot at the center of its cell."""
        cell = grid.index(5, 1)
        assert decode_doa((0.0, 0.0), cell, grid) == grid.cell_center(cell)

    def test_saturated_u_reaches_half_extended_width(self, grid):
        """A saturated u moves the slot half of the 90 degree reach."""
        cell = grid.index(2, 2)
        center = grid.cell_center(cell)
        assert decode_doa((50.0, 0.0), cell, grid).azimuth == pytest.approx(center.azimuth + 45.0)

    def test_elevation_is_clamped(self, grid):
        """Slots in the top row cannot decode beyond the pole."""
        assert decode_doa((0.0, 50.0), grid.index(0, 3), grid).elevation == 90.0

    def test_aimed_slot_round_trip(self, grid, rng, aim):
        """Targets inside the reachable region are recovered by decoding."""
        raw = np.zeros((1, grid.num_cells, 1, 4))
        for _ in range(200):
            flat = int(rng.integers(grid.num_cells))
            center = grid.cell_center(grid.from_flat(flat))
            target = Direction(
                center.azimuth + float(rng.uniform(-44.0, 44.0)),
                float(np.clip(center.elevation + rng.uniform(-44.0, 44.0), -89.9, 89.9)),
            )
            aim(raw, 0, flat, 0, target, grid, 1)
            decoded = PredictionTensor(raw, grid, 1).slot_direction(0, flat, 0)
            assert float(wrap_azimuth(decoded.azimuth - target.azimuth)) == pytest.approx(0.0, abs=1e-9)
            assert decoded.elevation == pytest.approx(target.elevation, abs=1e-9)


class TestReferenceSet:
    """Test cases for reference validation."""

    def test_empty_rows_are_silence(self, grid):
        """An empty list yields a valid empty set."""
        refs = events_to_reference_set([], 10, 3, grid)
        assert len(refs) == 0
        assert refs.extended_masks().shape == (0, grid.num_cells)

    def test_rows_are_sorted_and_duplicates_kept(self, grid):
        """Rows are sorted by (frame, class); identical rows stay."""
        rows = [(2, 1, 10.0, 0.0), (0, 2, 5.0, 5.0), (2, 1, 10.0, 0.0), (0, 0, -5.0, 0.0)]
        refs = events_to_reference_set(rows, 3, 3, grid)
        assert [(e.frame, e.class_id) for e in refs.events] == [(0, 0), (0, 2), (2, 1), (2, 1)]

    def test_same_class_events_map_to_their_cells(self, grid):
        """Two same-class events and one other-class event at one frame."""
        rows = [(4, 1, 30.0, 20.0), (4, 1, -100.0, -50.0), (4, 3, 160.0, 70.0)]
        refs = events_to_reference_set(rows, 5, 4, grid)
        cells = [(cell_of(e.doa, grid).i, cell_of(e.doa, grid).j) for e in refs.events_at(4)]
        assert cells == [(4, 2), (1, 0), (7, 3)]

    @pytest.mark.parametrize(
        "row, fragment",
        [
            ((0, 5, 0.0, 0.0), "class 5"),
            ((9, 0, 0.0, 0.0), "frame 9"),
            ((0, 0, 0.0, 95.0), "Elevation"),
            ((0, 0, 0.0), "expected 4 fields"),
        ],
    )
    def test_row_errors_carry_row_number(self, grid, row, fragment):
        """Invalid rows raise with their row number."""
        rows = [(0, 0, 0.0, 0.0), row]
        with pytest.raises(RowValidationError) as excinfo:
            events_to_reference_set(rows, 5, 3, grid, row_offset=2)
        assert excinfo.value.row_number == 3
        assert fragment in str(excinfo.value)

    def test_direct_construction_validates(self, grid):
        """Constructing a set with an out-of-range event is a configuration error."""
        with pytest.raises(ConfigurationError):
            ReferenceSet((ReferenceEvent(3, 0, Direction(0.0, 0.0)),), 2, 1, grid)


class TestPredictionTensor:
    """Test cases for the raw tensor wrapper."""

    def test_layout_accessors(self, grid):
        """Class logits, existence and DOA channels follow the documented layout."""
        raw = np.arange(2 * 32 * 3 * 7, dtype=float).reshape(2, 32, 3, 7)
        preds = PredictionTensor(raw, grid, 4)
        assert preds.class_logits.shape == (2, 32, 3, 4)
        assert preds.existence_logits[0, 0, 0] == 4.0
        assert preds.doa_slice == slice(5, 7)
        assert (preds.num_frames, preds.num_predictions) == (2, 3)

    @pytest.mark.parametrize("shape", [(2, 31, 3, 7), (2, 32, 3, 6), (32, 3, 7)])
    def test_shape_mismatch(self, grid, shape):
        """G and C + 3 must match the grid and class count."""
        with pytest.raises(ConfigurationError):
            PredictionTensor(np.zeros(shape), grid, 4)

    def test_non_finite_rejected(self, grid):
        """NaN values are rejected."""
        raw = np.zeros((1, 32, 1, 4))
        raw[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            PredictionTensor(raw, grid, 1)


class TestAssignResponsibility:
    """Test cases for multi-threshold responsibility."""

    def test_exact_prediction_is_responsible_everywhere(self, grid, aim):
        """A slot decoded exactly at its reference is responsible at every threshold."""
        ref = Direction(22.5, 10.0)
        refs = ReferenceSet((ReferenceEvent(0, 1, ref),), 1, 2, grid)
        flat = cell_of(ref, grid).flat
        raw = aim(np.zeros((1, 32, 1, 5)), 0, flat, 0, ref, grid, 2)
        masks = assign_responsibility(refs, PredictionTensor(raw, grid, 2), THRESHOLDS)
        for tau in THRESHOLDS:
            assert masks.existence[tau][0, flat, 0]
            assert masks.classes[tau][0, flat, 0, 1]
            assert not masks.classes[tau][0, flat, 0, 0]

    def test_thirty_degrees_only_at_largest_threshold(self, grid, aim):
        """A slot 30 degrees away is responsible at 45 only."""
        ref = Direction(22.5, 10.0)
        refs = ReferenceSet((ReferenceEvent(0, 0, ref),), 1, 1, grid)
        flat = cell_of(ref, grid).flat
        raw = aim(np.zeros((1, 32, 1, 4)), 0, flat, 0, Direction(22.5, 40.0), grid, 1)
        masks = assign_responsibility(refs, PredictionTensor(raw, grid, 1), THRESHOLDS)
        assert masks.thresholds == THRESHOLDS
        assert [bool(masks.existence[tau][0, flat, 0]) for tau in THRESHOLDS] == [True, False, False]
        distances = {cell: distance for _, cell, _, distance in masks.slots_for(0, 45.0)}
        assert distances[flat] == pytest.approx(30.0)

    def test_silence_gives_empty_masks(self, grid):
        """No references leave every mask false."""
        refs = ReferenceSet((), 3, 2, grid)
        masks = assign_responsibility(refs, PredictionTensor.zeros(3, grid, 3, 2), THRESHOLDS)
        for tau in THRESHOLDS:
            assert not masks.existence[tau].any()
            assert not masks.classes[tau].any()
            assert len(masks.pairs[tau]) == 0

    def test_shape_mismatch_is_configuration_error(self, grid, small_refs):
        """Frames or classes that disagree are rejected."""
        with pytest.raises(ConfigurationError):
            assign_responsibility(small_refs, PredictionTensor.zeros(5, grid, 3, 3), THRESHOLDS)
        with pytest.raises(ConfigurationError):
            assign_responsibility(small_refs, PredictionTensor.zeros(2, grid, 3, 4), THRESHOLDS)

    def test_empty_thresholds_rejected(self, grid, small_refs):
        """At least one threshold is required."""
        with pytest.raises(ConfigurationError):
            assign_responsibility(small_refs, PredictionTensor.zeros(2, grid, 3, 3), [])

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_brute_force(self, seed):
        """Masks equal an explicit loop over references, slots and thresholds."""
        rng = np.random.default_rng(seed)
        grid = GridSpec()
        refs = random_refs(rng, 4, 5, 6, grid)
        preds = PredictionTensor(rng.normal(0.0, 2.0, (4, 32, 3, 8)), grid, 5)
        masks = assign_responsibility(refs, preds, THRESHOLDS)

        for tau in THRESHOLDS:
            existence = np.zeros((4, 32, 3), dtype=bool)
            classes = np.zeros((4, 32, 3, 5), dtype=bool)
            pairs = set()
            for m, event in enumerate(refs.events):
                for cell in extended_cells_of(event.doa, grid):
                    for k in range(3):
                        slot = preds.slot_direction(event.frame, cell.flat, k)
                        if angular_distance(slot, event.doa) < tau:
                            existence[event.frame, cell.flat, k] = True
                            classes[event.frame, cell.flat, k, event.class_id] = True
                            pairs.add((m, event.frame, cell.flat, k))
            np.testing.assert_array_equal(masks.existence[tau], existence)
            np.testing.assert_array_equal(masks.classes[tau], classes)
            found = masks.pairs[tau]
            assert set(zip(found.ref_index, found.frame, found.cell, found.slot)) == pairs

    def test_monotone_in_threshold(self, grid, rng):
        """Stricter thresholds select subsets."""
        refs = random_refs(rng, 4, 3, 10, grid)
        preds = PredictionTensor(rng.normal(0.0, 1.0, (4, 32, 3, 6)), grid, 3)
        masks = assign_responsibility(refs, preds, THRESHOLDS)
        assert not (masks.existence[10.0] & ~masks.existence[25.0]).any()
        assert not (masks.existence[25.0] & ~masks.existence[45.0]).any()
        for tau in THRESHOLDS:
            assert not (masks.classes[tau].any(axis=-1) & ~masks.existence[tau]).any()

    def test_summary_counts(self, grid, aim):
        """The summary reports pairs, slots, positives and covered references."""
        ref = Direction(22.5, 10.0)
        far = Direction(-90.0, -60.0)
        refs = ReferenceSet((ReferenceEvent(0, 0, ref), ReferenceEvent(0, 0, far)), 1, 1, grid)
        flat = cell_of(ref, grid).flat
        raw = np.zeros((1, 32, 1, 4))
        raw[..., 2:] = 50.0  # park every slot at its far corner
        aim(raw, 0, flat, 0, ref, grid, 1)
        summary = assign_responsibility(refs, PredictionTensor(raw, grid, 1), THRESHOLDS).summary()
        assert summary["10"] == {
            "responsible_pairs": 1,
            "responsible_slots": 1,
            "class_positives": 1,
            "references_covered": 1,
            "references_uncovered": 1,
        }
