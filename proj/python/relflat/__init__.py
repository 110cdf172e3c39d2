"""Relative flatness of neural network layers and flatness-aware training."""

import json as _json

from ._relflat import (
    CapacityError,
    ConfigError,
    DimensionError,
    Error,
    FormatError,
    Model,
    NumericError,
    ValidationError,
    fam_gradient,
    gradcheck,
    kappa,
    lr_at,
    two_moons,
)
from ._relflat import train as _train


def train(config, write_outputs=False):
    """Train from a run config given as a dict or a JSON string."""
    if not isinstance(config, str):
        config = _json.dumps(config)
    return _train(config, write_outputs)


__all__ = [
    "CapacityError",
    "ConfigError",
    "DimensionError",
    "Error",
    "FormatError",
    "Model",
    "NumericError",
    "ValidationError",
    "fam_gradient",
    "gradcheck",
    "kappa",
    "lr_at",
    "train",
    "two_moons",
]
