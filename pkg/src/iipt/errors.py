"""Exception types shared across the package."""


class UserInputError(Exception):
    """Bad user-supplied input: files, flags, mismatched score streams."""


class InvariantError(RuntimeError):
    """An internal consistency check failed."""


class NonFiniteError(InvariantError):
    """A tensor or gradient stopped being finite."""


class ShapeError(ValueError):
    """Operands with incompatible shapes."""
