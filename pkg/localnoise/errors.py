from typing import Optional


class LocalNoiseError(ValueError):
    """Base error; `field` names the offending parameter when there is one."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field

    def one_line(self) -> str:
        field = self.field or "-"
        message = " ".join(str(self).split())
        return f"error: {type(self).__name__}: field={field}: {message}"


class ShapeMismatchError(LocalNoiseError):
    pass


class NetworkBuildError(LocalNoiseError):
    pass


class FormatError(LocalNoiseError):
    pass


class ConfigError(LocalNoiseError):
    pass


class AttackError(LocalNoiseError):
    pass


class DatasetSplitError(LocalNoiseError):
    pass
