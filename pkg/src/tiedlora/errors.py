"""Exception types shared across the package.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and
:class:`NumericError` / :class:`VerificationError` to exit code 2.
"""


class ValidationError(ValueError):
    """Bad input: wrong shapes, unknown modes, inconsistent configs."""


class DimensionError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class DegenerateBatchError(ValidationError):
    pass


class MaskError(ValidationError):
    """A frozen component was requested where a trainable one is required."""


class GenerationError(ValidationError):
    pass


class NumericError(ArithmeticError):
    pass


class VerificationError(RuntimeError):
    pass
