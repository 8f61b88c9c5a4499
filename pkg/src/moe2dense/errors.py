"""Exception hierarchy shared by every stage of the converter."""


class Moe2DenseError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ValidationError(Moe2DenseError, ValueError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class ModelFormatError(ValidationError):
    pass


class ConstructionError(ValidationError):
    pass


class NumericError(Moe2DenseError, ArithmeticError):
    exit_code = 3


class MergeError(NumericError):
    pass


class TheoremCheckError(Moe2DenseError):
    exit_code = 4
