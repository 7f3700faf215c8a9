"""Exception types shared across the package."""


class EmbaugError(Exception):
    """Base class for all package-specific errors."""


class ZeroNormRow(EmbaugError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"row {row} has L2 norm below tolerance, cannot normalize")


class DimensionMismatch(EmbaugError):
    pass


class ShapeMismatch(EmbaugError):
    pass


class InvalidN(EmbaugError):
    pass


class EmptyCandidateSet(EmbaugError):
    pass


class NoPositivePairs(EmbaugError):
    pass


class NoPositiveAvailable(EmbaugError):
    def __init__(self, anchor: int):
        self.anchor = anchor
        super().__init__(f"anchor {anchor} has no same-class original to pair with")


class NoNegativeAvailable(EmbaugError):
    def __init__(self, anchor: int):
        self.anchor = anchor
        super().__init__(f"anchor {anchor} has no different-class candidate")


class EmptyTrace(EmbaugError):
    pass


class InsufficientClasses(EmbaugError):
    pass


class NonFiniteLoss(EmbaugError):
    pass


class EmptyDatabase(EmbaugError):
    pass


class InvalidK(EmbaugError):
    pass


class LengthMismatch(EmbaugError):
    pass


class ParseError(EmbaugError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NonFiniteValue(EmbaugError):
    def __init__(self, line: int):
        self.line = line
        super().__init__(f"line {line}: non-finite feature value")


class EmptyFile(EmbaugError):
    pass


class InvalidFraction(EmbaugError):
    pass


class ConfigError(EmbaugError):
    """Raised for malformed or unknown configuration keys/values."""


class IOFailure(EmbaugError):
    pass
