"""Exception types raised across the package."""


class ParameterError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class ValidationError(ValueError):
    """Dataset content does not match its declared format.

    ``problems`` holds one ``(path, message)`` tuple per offending file.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        lines = [f"{path}: {msg}" for path, msg in self.problems]
        super().__init__("dataset validation failed:\n  " + "\n  ".join(lines))


class ProtocolError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, step):
        self.step = step
        super().__init__(f"step {step}: {message}")
