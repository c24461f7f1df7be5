"""Exception types shared across the package.

Every error raised by flowcast code derives from FlowcastError so callers
can catch the whole family at the CLI boundary.
"""


class FlowcastError(Exception):
    pass


# graph
class CycleDetectedError(FlowcastError):
    pass


class IndexOutOfRangeError(FlowcastError):
    pass


class ScheduleOutOfWindowError(FlowcastError):
    pass


# scm
class NumericOverflowError(FlowcastError):
    pass


class AbductionUnsolvableError(FlowcastError):
    pass


class OffsetTooSmallError(FlowcastError):
    pass


# numeric kernel
class ShapeMismatchError(FlowcastError):
    pass


class NonFiniteValueError(FlowcastError):
    pass


class NonScalarLossError(FlowcastError):
    pass


# encoder
class EmptyContextError(FlowcastError):
    pass


class MissingNodeValueError(FlowcastError):
    pass


# flow
class NonFiniteTrajectoryError(FlowcastError):
    pass


class SOutOfRangeError(FlowcastError):
    pass


# trainer
class EmptyForecastWindowError(FlowcastError):
    pass


class DivergingLossError(FlowcastError):
    pass


# forecaster
class ModelDagMismatchError(FlowcastError):
    pass


class FactualLengthMismatchError(FlowcastError):
    pass


# metrics
class ZeroContextStdError(FlowcastError):
    pass


class DegenerateSampleError(FlowcastError):
    pass


class SampleTooSmallError(FlowcastError):
    pass


class AlignmentError(FlowcastError):
    pass


# cli / persistence
class InvalidConfigError(FlowcastError):
    pass


class ChecksumMismatchError(FlowcastError):
    pass


class ScheduleParseError(FlowcastError):
    pass
