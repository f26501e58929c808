class CovilearnError(Exception):
    """Base class for every error raised by covilearn."""


class ArgumentError(CovilearnError, ValueError):
    pass


class DimensionError(ArgumentError):
    pass


class NonFiniteError(ArgumentError):
    pass


class NameMismatchError(ArgumentError):
    def __init__(self, missing: set[str], unexpected: set[str]) -> None:
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = []
        if self.missing:
            parts.append(f"missing: {', '.join(self.missing)}")
        if self.unexpected:
            parts.append(f"unexpected: {', '.join(self.unexpected)}")
        super().__init__("parameter name mismatch (" + "; ".join(parts) + ")")


class FormatError(CovilearnError, ValueError):
    pass


class UnsupportedFeatureError(FormatError):
    def __init__(self, feature: str, detail: str = "") -> None:
        self.feature = feature
        message = f"unsupported feature: {feature}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class WeightsError(FormatError):
    def __init__(self, parameter: str, reason: str) -> None:
        self.parameter = parameter
        super().__init__(f"weights for '{parameter}': {reason}")


class MissingFileError(CovilearnError, FileNotFoundError):
    def __init__(self, path: object) -> None:
        self.path = str(path)
        super().__init__(f"file not found: {self.path}")
