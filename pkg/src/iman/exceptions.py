"""Exception hierarchy shared across the package."""


class ImanError(Exception):
    """Base class for all package errors."""


class DimensionError(ImanError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ImanError, ValueError):
    """A numeric parameter or index is outside its valid domain."""


class ConfigurationError(ImanError, ValueError):
    """A model or run configuration is internally inconsistent."""


class ConstraintError(ImanError, ValueError):
    """A structural constraint (e.g. at least one present modality) is violated."""


class EvaluationError(ImanError, ArithmeticError):
    """A function produced a non-finite value.

    ``index`` carries the flat coordinate being perturbed when the failure
    occurred, or ``None`` when it happened at the unperturbed point.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrainingError(ImanError, RuntimeError):
    """Optimization diverged (non-finite loss)."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class UndefinedMetricError(ImanError, ValueError):
    """A metric is undefined for the given labels (e.g. AUC on one class)."""
