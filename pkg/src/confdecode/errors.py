"""Exception hierarchy shared by every module."""


class ConfDecodeError(Exception):
    """Base class for all package errors."""


class InvalidLogits(ConfDecodeError, ValueError):
    pass


class InvalidProbability(ConfDecodeError, ValueError):
    pass


class InvalidShape(ConfDecodeError, ValueError):
    pass


class InvalidConfig(ConfDecodeError, ValueError):
    """Raised with every violated field listed in ``errors``."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class InsufficientData(ConfDecodeError, ValueError):
    pass


class FormatError(ConfDecodeError):
    """Malformed on-disk artifact. ``offset`` is the byte offset of the problem, if known."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class NumericalError(ConfDecodeError, ArithmeticError):
    pass


class TrainingError(ConfDecodeError, RuntimeError):
    pass


class UnknownOperatingPoint(ConfDecodeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown operating point"


class InvalidCurve(ConfDecodeError, ValueError):
    pass


class StageError(ConfDecodeError, RuntimeError):
    """A pipeline stage is missing the artifact it depends on."""

    def __init__(self, message, missing=None):
        self.missing = missing
        super().__init__(message)
