"""Exception hierarchy shared by all modules."""


class TLAttackError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(TLAttackError, ValueError):
    pass


class NumericOverflowError(TLAttackError, ArithmeticError):
    """A public operation produced NaN or Inf.

    ``iteration`` is set when the failure happens inside an iterative loop.
    """

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class TrainingDivergedError(NumericOverflowError):
    pass


class ModelFormatError(TLAttackError, ValueError):
    """Bad magic, unsupported version, truncation or checksum failure."""


class IdxFormatError(TLAttackError, ValueError):
    pass


class DegenerateSampleError(TLAttackError, ValueError):
    pass


class ConvergenceError(TLAttackError, RuntimeError):
    pass


class ConfigError(TLAttackError, ValueError):
    pass
