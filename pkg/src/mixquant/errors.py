"""Exception types shared across the toolkit.

Every error raised on a contract violation derives from MixQuantError so
callers (and the CLI) can distinguish data/usage problems from genuine bugs.
"""


class MixQuantError(Exception):
    """Base class for all toolkit errors."""


# graph / IR
class CycleDetected(MixQuantError):
    pass


class UnknownNode(MixQuantError):
    pass


class ShapeMismatch(MixQuantError):
    pass


class UnresolvedShape(MixQuantError):
    pass


class UnsupportedKind(MixQuantError):
    pass


# serialization
class FormatVersionMismatch(MixQuantError):
    pass


class CorruptBlob(MixQuantError):
    pass


class UnknownArch(MixQuantError):
    pass


# execution
class MissingQuantParams(MixQuantError):
    pass


class NonPositiveVariance(MixQuantError):
    pass


# calibration
class EmptyCalibrationSet(MixQuantError):
    pass


class EmptyProfile(MixQuantError):
    pass


# quantization transform
class UnknownNodeInList(MixQuantError):
    pass


class MissingCalibration(MixQuantError):
    pass


# metrics / sensitivity
class KeyMismatch(MixQuantError):
    pass


class NonMonotonicIndices(MixQuantError):
    pass


class MissingLabels(MixQuantError):
    pass


class EmptyImageBatch(MixQuantError):
    pass


# accounting
class IncompleteConfig(MixQuantError):
    pass


class InvariantViolation(MixQuantError):
    """An internal consistency check failed; indicates a bug, not bad input."""
