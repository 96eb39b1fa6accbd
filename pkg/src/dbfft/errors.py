"""Exception hierarchy."""


class DBFFTError(Exception):
    pass


class InvalidGridError(DBFFTError, ValueError):
    pass


class ContractError(DBFFTError, ValueError):
    pass


class ConjugateSymmetryError(DBFFTError, ValueError):
    pass


class ParameterError(DBFFTError, ValueError):
    pass


class InvertedElementError(DBFFTError):
    def __init__(self, message, voxel=None):
        super().__init__(message)
        self.voxel = voxel


class PreconditionerError(DBFFTError):
    pass


class NumericalBreakdownError(DBFFTError):
    pass


class ConvergenceError(DBFFTError):
    """Raised when an increment cannot be completed; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class GenerationError(DBFFTError):
    pass


class PhaseMapFormatError(DBFFTError, ValueError):
    pass


class ConfigError(DBFFTError, ValueError):
    pass
