"""Contrastive unpaired image translation with adversarially generated hard negatives."""

from negcut.errors import (
    ConfigError,
    DegenerateInputError,
    InvalidInputError,
    InvariantError,
    NumericalFailureError,
    TrainingAborted,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "InvalidInputError",
    "InvariantError",
    "NumericalFailureError",
    "TrainingAborted",
]
