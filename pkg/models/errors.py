"""
Exception hierarchy shared by every package of the toolkit.

Library code raises these; only the CLI turns them into log lines and exit codes.
"""

from typing import Optional


class CompressionError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(CompressionError, ValueError):
    """Tensor or layer shapes do not compose."""


class NonFiniteError(CompressionError, FloatingPointError):
    """NaN/Inf found in weights, gradients or activations."""

    def __init__(self, message: str, layer: Optional[str] = None):
        self.layer = layer
        if layer is not None:
            message = f"{message} (layer: {layer})"
        super().__init__(message)


class DivergenceError(CompressionError, RuntimeError):
    """Training loss blew up beyond the divergence guard."""


class AccuracyCollapseError(CompressionError, RuntimeError):
    """Retraining could not keep accuracy within the collapse guard."""


class InfeasibleBudgetError(CompressionError, ValueError):
    """A pruning budget cannot be met (negative, too large, or loosened between rounds)."""


class AccuracyMismatchError(CompressionError, ValueError):
    """Two compressed models are not at matched accuracy."""


class ConfigError(CompressionError, ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class CheckpointError(CompressionError, IOError):
    """Checkpoint or manifest cannot be read or has an unsupported version."""
