"""Exception types raised across the package."""


class CDCLError(Exception):
    """Base class for all package errors."""


class ZeroVectorError(CDCLError, ValueError):
    pass


class EmptyInputError(CDCLError, ValueError):
    pass


class InvalidConfigError(CDCLError, ValueError):
    pass


class DimensionMismatchError(CDCLError, ValueError):
    pass


class EmptyPositivesError(CDCLError, ValueError):
    pass


class TemperatureNonPositiveError(CDCLError, ValueError):
    pass


class MissingPseudoLabelsError(CDCLError, ValueError):
    pass


class LabelOutOfRangeError(CDCLError, ValueError):
    pass


class EmptyClassError(CDCLError, ValueError):
    def __init__(self, cls: int):
        super().__init__(f"class {cls} has no samples")
        self.cls = cls


class NotPreparedError(CDCLError, RuntimeError):
    """Model has not been through ``prepare_source_free``."""


class InvalidRatioError(CDCLError, ValueError):
    pass


class NumericalError(CDCLError, FloatingPointError):
    """A loss or parameter became NaN/Inf during training."""


class FormatError(CDCLError, ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path
