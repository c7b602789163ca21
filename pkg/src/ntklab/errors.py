"""Exception types shared across the package."""


class NtkLabError(Exception):
    """Base class for all package errors."""


class ParameterError(NtkLabError, ValueError):
    """An argument violates a documented precondition."""


class DataFormatError(NtkLabError, ValueError):
    """An on-disk container is malformed or violates an invariant."""


class EmptyOrthogonalComplementError(NtkLabError, ValueError):
    """The sample matrix spans the whole input space."""


class UnsupportedArchitectureError(NtkLabError, TypeError):
    """The operation only applies to a feature-extractor branch the model lacks."""


class DegenerateResidualsError(NtkLabError, ValueError):
    """Every residual-driven denominator vanished."""


class DegenerateInputError(NtkLabError, ValueError):
    """Zero-norm rows (or similar) make the requested quantity undefined."""


class DivergenceError(NtkLabError, RuntimeError):
    """Training produced a non-finite loss or parameter.

    Carries the partial trace recorded up to the aborted step in ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConvergenceError(NtkLabError, RuntimeError):
    """An iterative solver did not reach its tolerance within its budget."""


class ConfigError(NtkLabError, ValueError):
    """A CLI configuration file failed schema validation."""
