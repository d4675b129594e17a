"""NucleiHVT nuclei segmentation: models, losses, metrics and data utilities."""

from ._core import (
    GRADCHECK_TOLERANCE,
    ConfigError,
    DataError,
    Model,
    ShapeError,
    argmax_labels,
    classwise_report,
    combined_loss,
    cross_entropy,
    default_config,
    error_map,
    flop_estimate,
    gradcheck,
    param_count,
    read_mask,
    read_ppm,
    set_worker_count,
    synthetic_pair,
    worker_count,
)

__all__ = [
    "GRADCHECK_TOLERANCE",
    "ConfigError",
    "DataError",
    "Model",
    "ShapeError",
    "argmax_labels",
    "classwise_report",
    "combined_loss",
    "cross_entropy",
    "default_config",
    "error_map",
    "flop_estimate",
    "gradcheck",
    "param_count",
    "read_mask",
    "read_ppm",
    "set_worker_count",
    "synthetic_pair",
    "worker_count",
]
