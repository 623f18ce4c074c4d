"""Generalized few-shot semantic segmentation toolkit.

Two-phase training (base pre-training, novel fine-tuning) over a prototype
feature decomposer, with novel prototype modulation, novel classifier
calibration and context consistency learning.
"""

from gfss.errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    DegenerateColumnWarning,
    InvariantError,
    LineageError,
    ShapeError,
    TrainingDivergenceError,
)

__version__ = "0.1.0"

BACKGROUND_ID = 0
IGNORE_ID = 255

__all__ = [
    "BACKGROUND_ID",
    "IGNORE_ID",
    "CheckpointError",
    "ConfigurationError",
    "DataError",
    "DegenerateColumnWarning",
    "InvariantError",
    "LineageError",
    "ShapeError",
    "TrainingDivergenceError",
]
