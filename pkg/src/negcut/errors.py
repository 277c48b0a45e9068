class InvalidInputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class DegenerateInputError(InvalidInputError):
    """Raised for inputs that are formally valid but numerically degenerate (e.g. a zero vector)."""


class NumericalFailureError(ArithmeticError):
    pass


class InvariantError(RuntimeError):
    """An internal consistency check failed; indicates a bug, not bad input."""


class TrainingAborted(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message
