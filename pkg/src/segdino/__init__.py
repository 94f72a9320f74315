"""Frozen-ViT segmentation with a light trainable decoder, in plain numpy."""

from segdino.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
    ParameterError,
    SegDinoError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "NumericError",
    "ParameterError",
    "SegDinoError",
    "ShapeError",
]
