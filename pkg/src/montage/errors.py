"""Exception types shared across the package."""


class MontageError(Exception):
    pass


# tensor core
class ShapeMismatch(MontageError, ValueError):
    pass


class NonScalarLoss(MontageError, ValueError):
    pass


# rope / packing / model
class TooManyFrames(MontageError, ValueError):
    pass


class PlanMismatch(MontageError, ValueError):
    pass


class UnknownToken(MontageError, KeyError):
    pass


class IndivisibleShape(MontageError, ValueError):
    pass


class ConfigMismatch(MontageError, ValueError):
    pass


class ConfigError(MontageError, ValueError):
    """Malformed or unknown configuration content."""


# data
class BudgetTooSmall(MontageError, ValueError):
    pass


# training
class StepOutOfRange(MontageError, ValueError):
    pass


class EmptyTask(MontageError, ValueError):
    pass


class NonFiniteLoss(MontageError, FloatingPointError):
    pass


class CheckpointError(MontageError, IOError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class DigestMismatch(CheckpointError):
    pass


# metrics
class EmptyMask(MontageError, ValueError):
    pass


class ZeroVector(MontageError, ValueError):
    pass


class EmptySet(MontageError, ValueError):
    pass


class NeedTwo(MontageError, ValueError):
    pass


class Transport(MontageError, IOError):
    pass


class MalformedReply(MontageError, ValueError):
    pass


class ScoreOutOfRange(MontageError, ValueError):
    pass
