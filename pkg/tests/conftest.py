"""
Shared fixtures.
"""

import os

import numpy as np
import pytest
from scipy.special import logit

from src.geometry import Direction, GridSpec, wrap_azimuth
from src.labels import ReferenceEvent, ReferenceSet

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def grid() -> GridSpec:
    return GridSpec()


@pytest.fixture
def fixture_path():
    """Path of a file under tests/fixtures."""

    def resolve(name: str) -> str:
        return os.path.join(FIXTURES, name)

    return resolve


@pytest.fixture
def small_refs(grid: GridSpec) -> ReferenceSet:
    """Two frames, three classes, a same-class pair at frame 1."""
    events = (
        ReferenceEvent(0, 0, Direction(10.0, 20.0)),
        ReferenceEvent(0, 2, Direction(-120.0, -40.0)),
        ReferenceEvent(1, 1, Direction(100.0, 5.0)),
        ReferenceEvent(1, 1, Direction(-60.0, 60.0)),
    )
    return ReferenceSet(events, num_frames=2, num_classes=3, grid=grid)


def aim_slot(raw, frame, cell, slot, direction, grid, num_classes):
    """Set a slot's (u, v) so it decodes to the given direction; returns raw."""
    center_az, center_el = grid.cell_centers()
    offset_az = float(wrap_azimuth(direction.azimuth - center_az[cell]))
    offset_el = direction.elevation - center_el[cell]
    raw[frame, cell, slot, num_classes + 1] = logit(offset_az / grid.lon_reach + 0.5)
    raw[frame, cell, slot, num_classes + 2] = logit(offset_el / grid.lat_reach + 0.5)
    return raw


@pytest.fixture
def aim():
    """Point a prediction slot at a direction inside its reachable region."""
    return aim_slot
