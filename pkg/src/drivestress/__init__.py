"""Multimodal driver-stress analysis: windowed features, paired phase
statistics, PCA/LDA stress axes and Transformer classifiers on facial
coefficient, biosignal and gaze streams."""

from .errors import (
    ConfigError,
    DegenerateDataError,
    EmptyStreamError,
    InsufficientDataError,
    ManifestError,
    NonFiniteGradientError,
    SchemaError,
    ShapeError,
    StressError,
    ZeroVarianceError,
)

__version__ = "0.1.0"
