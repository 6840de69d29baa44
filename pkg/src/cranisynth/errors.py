"""Exception hierarchy. Each class maps to one failure mode named in the docs."""


class CranisynthError(Exception):
    """Base class for package errors."""


class ArgumentError(CranisynthError, ValueError):
    """Invalid argument value or shape/grid mismatch."""


class VolumeFormatError(CranisynthError, ValueError):
    """Volume payload inconsistent with its sidecar header."""


class VolumeVersionError(CranisynthError, ValueError):
    """Sidecar header carries an unsupported format version."""


class GenerationError(CranisynthError):
    """Phantom geometry cannot be realized."""


class EmptyForegroundError(CranisynthError):
    """No voxel above the foreground threshold."""


class DomainError(CranisynthError, ValueError):
    """Input outside the mathematical domain of an operation."""


class StateError(CranisynthError, RuntimeError):
    """A required artifact (weights, checkpoint, split) is missing."""


class ConfigError(CranisynthError, ValueError):
    """Malformed or incomplete configuration."""


class InsufficientDataError(CranisynthError, ValueError):
    """Too few usable observations for a statistical test."""


class UndefinedDistanceError(CranisynthError, ValueError):
    """Surface distance requested for a label missing from one mask."""


class NaNLossError(CranisynthError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id
