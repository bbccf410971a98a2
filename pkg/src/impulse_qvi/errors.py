"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class ImpulseQVIError(Exception):
    """Base class for all errors raised by :mod:`impulse_qvi`."""


class ExprSyntaxError(ImpulseQVIError):
    """Malformed expression source. ``position`` is the 0-based character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class UnknownIdentifierError(ExprSyntaxError):
    pass


class ArityError(ExprSyntaxError):
    pass


class ExprDomainError(ImpulseQVIError):
    """Evaluation left the domain of an operation (division by zero, sqrt of a negative...).

    ``index`` is the flat index of the first offending element when the
    expression was evaluated on an array of points, else ``None``.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class MissingVariableError(ImpulseQVIError):
    pass


class ConfigError(ImpulseQVIError):
    pass


class GridError(ImpulseQVIError):
    pass


class NonMonotoneError(ImpulseQVIError):
    """The requested stencil cannot be made positive-coefficient on this grid."""


class CFLError(ImpulseQVIError):
    pass


class ConvergenceError(ImpulseQVIError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class ArtifactError(ImpulseQVIError):
    """Missing, malformed or mutually inconsistent run artifacts."""
