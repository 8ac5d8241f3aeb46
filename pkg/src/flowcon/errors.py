"""Exception types shared across the package."""

from __future__ import annotations


class FlowconError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowconError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class NumericError(FlowconError):
    """A non-finite value appeared during evaluation or backpropagation."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class StateError(FlowconError):
    """An operation was invoked out of order (e.g. backward before forward)."""


class InvalidArgument(FlowconError):
    """A caller-supplied argument violates a precondition."""


class FormatError(FlowconError):
    """A binary file failed validation (magic, version, CRC, truncation)."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} at byte offset {offset}")
        self.offset = offset


class ConfigError(FlowconError):
    """A run configuration file is malformed or out of range."""


class TrainingDiverged(FlowconError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, epoch: int, batch_index: int, cause: Exception):
        super().__init__(f"numeric failure in epoch {epoch}, batch {batch_index}: {cause}")
        self.epoch = epoch
        self.batch_index = batch_index
        self.cause = cause
