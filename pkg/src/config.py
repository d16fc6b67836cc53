"""
Configuration management for the AD-YOLO SELD toolkit.
Loads environment variables and flat key=value files and provides centralized configuration.
"""

import os
import copy
import logging
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Tuple
from dotenv import dotenv_values, load_dotenv

from .geometry import GridSpec

if TYPE_CHECKING:
    from .loss import LossWeights

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = "ADYOLO_"


class ConfigurationError(ValueError):
    """Raised for invalid settings or inconsistent tensor/grid shapes."""


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"Not a boolean: '{value}'")


def _parse_floats(value: str) -> Tuple[float, ...]:
    try:
        return tuple(float(part) for part in value.split(",") if part.strip())
    except ValueError as e:
        raise ConfigurationError(f"Not a comma-separated list of numbers: '{value}'") from e


# name -> (default as text, parser)
_FIELDS: Dict[str, Tuple[str, Any]] = {
    "CELL_WIDTH": ("45", float),
    "CELL_HEIGHT": ("45", float),
    "OVERLAP_FRACTION": ("0.5", float),
    "NUM_PREDICTIONS": ("3", int),
    "NUM_CLASSES": ("5", int),
    "NUM_FRAMES": ("100", int),
    "THRESHOLDS": ("45,25,10", _parse_floats),
    "LOSS_WEIGHTS": ("5,1,5,3", _parse_floats),
    "UPSILON": ("15", float),
    "SCORE_THRESHOLD": ("0.5", float),
    "LABELS_PER_SECOND": ("10", int),
    "SEED": ("0", int),
    "EXISTENCE_LOSS": ("true", _parse_bool),
    "HIDDEN_DIM": ("256", int),
    "EPOCHS": ("3000", int),
    "LEARNING_RATE": ("1.0", float),
}


class Config:
    """Centralized configuration class."""

    # Grid configuration
    CELL_WIDTH: float
    CELL_HEIGHT: float
    OVERLAP_FRACTION: float

    # Output tensor layout
    NUM_PREDICTIONS: int
    NUM_CLASSES: int
    NUM_FRAMES: int

    # Loss configuration
    THRESHOLDS: Tuple[float, ...]
    LOSS_WEIGHTS: Tuple[float, ...]
    EXISTENCE_LOSS: bool

    # Decoding and evaluation
    UPSILON: float
    SCORE_THRESHOLD: float
    LABELS_PER_SECOND: int

    # Toy training
    SEED: int
    HIDDEN_DIM: int
    EPOCHS: int
    LEARNING_RATE: float

    # Location-sensitive detection gate, degrees
    DOA_THRESHOLD: float = 20.0

    def __init__(self, values: Optional[Dict[str, str]] = None):
        """
        Initialize configuration from defaults, the environment and explicit values.

        Args:
            values: Optional raw key=value strings that take precedence over
                the environment (e.g. the contents of a config file)

        Raises:
            ConfigurationError: If a value cannot be parsed or a key is unknown
        """
        values = values or {}
        unknown = [key for key in values if key.upper() not in _FIELDS]
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys: {', '.join(sorted(unknown))}")
        normalized = {key.upper(): value for key, value in values.items()}

        for name, (default, parser) in _FIELDS.items():
            raw = normalized.get(name)
            if raw is None:
                raw = os.getenv(f"{ENV_PREFIX}{name}", default)
            try:
                setattr(self, name, parser(raw))
            except ValueError as e:
                raise ConfigurationError(f"Invalid value for {name}: '{raw}' ({e})") from e

    @classmethod
    def from_file(cls, path: str) -> "Config":
        """
        Load configuration from a flat key=value file.

        Args:
            path: Path to the configuration file

        Returns:
            Config: Configuration with file values over environment and defaults

        Raises:
            ConfigurationError: If the file is missing or holds invalid entries
        """
        if not os.path.isfile(path):
            raise ConfigurationError(f"Config file not found: {path}")
        raw = {key: value for key, value in dotenv_values(path).items() if value is not None}
        logger.info(f"Loaded {len(raw)} configuration entries from {path}")
        return cls(raw)

    def override(self, **values: Any) -> "Config":
        """
        Return a copy with the given attributes replaced; None values are ignored.

        Raises:
            ConfigurationError: If a key is not a configuration field
        """
        updated = copy.copy(self)
        for key, value in values.items():
            name = key.upper()
            if name not in _FIELDS:
                raise ConfigurationError(f"Unknown configuration key: {key}")
            if value is None:
                continue
            if isinstance(value, str):
                value = _FIELDS[name][1](value)
            elif isinstance(value, list):
                value = tuple(float(v) for v in value)
            setattr(updated, name, value)
        return updated

    def problems(self) -> List[str]:
        """List every validation problem, empty when the configuration is usable."""
        issues = []
        try:
            self.grid_spec()
        except ValueError as e:
            issues.append(str(e))
        if self.NUM_PREDICTIONS < 1:
            issues.append("NUM_PREDICTIONS must be >= 1")
        if self.NUM_CLASSES < 1:
            issues.append("NUM_CLASSES must be >= 1")
        if self.NUM_FRAMES < 1:
            issues.append("NUM_FRAMES must be >= 1")
        if not self.THRESHOLDS or any(t <= 0 or t > 180 for t in self.THRESHOLDS):
            issues.append("THRESHOLDS must be a non-empty list of degrees in (0, 180]")
        if len(self.LOSS_WEIGHTS) != 4 or any(w < 0 for w in self.LOSS_WEIGHTS):
            issues.append("LOSS_WEIGHTS must be four non-negative numbers")
        if self.UPSILON < 0:
            issues.append("UPSILON must be >= 0")
        if not 0.0 <= self.SCORE_THRESHOLD < 1.0:
            issues.append("SCORE_THRESHOLD must lie in [0, 1)")
        if self.LABELS_PER_SECOND < 1:
            issues.append("LABELS_PER_SECOND must be >= 1")
        if self.HIDDEN_DIM < 1 or self.EPOCHS < 0 or self.LEARNING_RATE < 0:
            issues.append("HIDDEN_DIM, EPOCHS and LEARNING_RATE must be positive")
        return issues

    def validate(self) -> bool:
        """
        Validate that the configuration is usable.

        Returns:
            bool: True if all settings are consistent, False otherwise
        """
        issues = self.problems()
        for issue in issues:
            logger.error(f"Invalid configuration: {issue}")
        return not issues

    def require_valid(self) -> "Config":
        """
        Raise instead of returning False.

        Raises:
            ConfigurationError: Listing every problem found
        """
        issues = self.problems()
        if issues:
            raise ConfigurationError("; ".join(issues))
        return self

    def grid_spec(self) -> GridSpec:
        """Get the grid described by the cell sizes and overlap."""
        return GridSpec(self.CELL_WIDTH, self.CELL_HEIGHT, self.OVERLAP_FRACTION)

    def thresholds(self) -> Tuple[float, ...]:
        """Get the responsibility thresholds, largest first."""
        return tuple(sorted(self.THRESHOLDS, reverse=True))

    def loss_weights(self) -> "LossWeights":
        """Get the loss weights (w_delta, w_pos, w_neg, w_class)."""
        from .loss import LossWeights

        w_delta, w_pos, w_neg, w_class = self.LOSS_WEIGHTS
        return LossWeights(w_delta, w_pos, w_neg, w_class)

    def as_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in _FIELDS}


# Global config instance
config = Config()
