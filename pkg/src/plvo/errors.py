"""Exception hierarchy shared across the package."""


class PlvoError(Exception):
    pass


class GeometryError(PlvoError, ValueError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class NonPositiveDisparity(GeometryError):
    pass


class DegenerateLine(GeometryError):
    pass


class DegenerateGeometry(GeometryError):
    pass


class ShapeMismatch(PlvoError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class NonScalarLoss(PlvoError, ValueError):
    pass


class NonPositiveTemperature(PlvoError, ValueError):
    pass


class MarginalSumMismatch(PlvoError, ValueError):
    pass


class IndexOutOfRange(PlvoError, IndexError):
    pass


class MissingLabels(PlvoError, ValueError):
    pass


class FormatError(PlvoError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VersionMismatch(FormatError):
    pass


class InsufficientCorrespondences(PlvoError, ValueError):
    pass


class SingularNormalEquations(PlvoError, ArithmeticError):
    pass


class NoConsensus(PlvoError, RuntimeError):
    pass


class EmptySequence(PlvoError, ValueError):
    pass
