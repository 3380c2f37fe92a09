"""Exception hierarchy shared by every subsystem."""


class TrunetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TrunetError, ValueError):
    """Operand extents are incompatible with the requested operation."""


class ContractError(TrunetError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(TrunetError, ValueError):
    """A configuration value is out of its admissible range."""


class DataError(TrunetError, ValueError):
    """Input data violates a physical constraint (e.g. negative rainfall)."""


class PlacementError(TrunetError, ValueError):
    """One or more stencils do not fit inside the grid."""

    def __init__(self, message, locations=()):
        super().__init__(message)
        self.locations = list(locations)


class FormatError(TrunetError, ValueError):
    """A file is not a valid container (bad magic or version)."""


class CorruptionError(TrunetError, ValueError):
    """A container ended before its declared payload."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class GradientCheckError(TrunetError, RuntimeError):
    """Finite-difference checking hit a non-finite value."""

    def __init__(self, message, parameter):
        super().__init__(f"{message}: {parameter}")
        self.parameter = parameter


class TrainingDiverged(TrunetError, RuntimeError):
    """The loss became non-finite during optimisation."""

    def __init__(self, step, last_good=None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good
