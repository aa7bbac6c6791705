"""
Exception hierarchy for the SegGaussian toolkit

Library code raises these; only the command-line entry point catches them and
turns them into exit codes.
"""

from typing import Dict, Optional, Sequence


class SegGaussianError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code = 2


class UsageError(SegGaussianError):
    exit_code = 1


class DataError(SegGaussianError):
    exit_code = 2


class NumericError(SegGaussianError):
    exit_code = 3


# Usage

class ConfigError(UsageError):
    pass


# Data and format problems

class IoFailure(DataError):
    pass


class MalformedHeader(DataError):
    pass


class CountMismatch(DataError):
    pass


class InvariantViolation(DataError):
    """A record violates a field invariant; `index` points at the record"""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message if index is None else f"{message} (record {index})")
        self.index = index


class EmptySpec(DataError):
    pass


class EmptyCloud(DataError):
    pass


class EmptyScene(DataError):
    pass


class NonPositiveVoxelSize(DataError):
    pass


class MissingSemantics(DataError):
    pass


class MissingLabels(DataError):
    pass


class ContribNotRetained(DataError):
    pass


class AssignOutOfRange(DataError):
    pass


class UnknownMode(DataError):
    pass


class NoValidTargets(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyManifest(DataError):
    pass


class EmptySplit(DataError):
    pass


class CheckpointVersionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    """Operand shapes are incompatible"""

    def __init__(self, message: str, shapes: Sequence[tuple] = ()):
        detail = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{message}: {detail}" if detail else message)
        self.shapes = [tuple(s) for s in shapes]


class IndexOutOfRange(DataError):
    pass


# Numeric failures

class NonScalarLoss(NumericError):
    pass


class GraphConsumed(NumericError):
    pass


class NonFinite(NumericError):
    """A loss or gradient went NaN/inf; `diagnostics` says where"""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class GradCheckFailed(NumericError):
    pass
