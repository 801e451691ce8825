class LesionForgeError(Exception):
    """Base class for errors raised by lesionforge."""


class DataError(LesionForgeError):
    """Bad, missing or inconsistent input data (CLI exit code 2)."""


class NumericalError(LesionForgeError):
    """Training diverged or produced non-finite values (CLI exit code 3)."""
