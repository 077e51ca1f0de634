"""Exception types carrying a short machine-readable error code."""


class AAUError(ValueError):
    """Base error; ``code`` is a stable kebab-case identifier such as ``"shape-mismatch"``."""

    exit_code = 3

    def __init__(self, code, detail=""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)


class ShapeError(AAUError):
    exit_code = 3


class FormatError(AAUError):
    exit_code = 2


class NumericError(AAUError):
    exit_code = 4


class ConfigError(AAUError):
    exit_code = 3
