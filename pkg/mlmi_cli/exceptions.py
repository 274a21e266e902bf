class MlmiError(Exception):
    """Base class for every error raised by mlmi_cli."""

    exit_code = 1


class ValidationError(MlmiError):
    """Bad input: malformed files, invalid formulas, violated preconditions."""

    exit_code = 1


class ParseError(ValidationError):
    """A text input could not be parsed. Carries the location of the problem."""

    def __init__(self, message: str, offset: int = None, row: int = None, column: str = None):
        self.offset = offset
        self.row = row
        self.column = column
        where = []
        if offset is not None:
            where.append(f"offset {offset}")
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class UnknownParameterError(ValidationError):
    """A constraint or plot request referenced a parameter that does not exist."""


class NumericalError(MlmiError):
    """A numerical routine failed (Cholesky, singular systems, non-finite draws)."""

    exit_code = 2


class DivergenceError(NumericalError):
    def __init__(self, message: str, iteration: int = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class ConvergenceError(NumericalError):
    """The optimizer stopped before converging. ``best`` holds the best fit found."""

    def __init__(self, message: str, best=None):
        self.best = best
        super().__init__(message)
