from typing import Any, Dict


class EgoPromptError(Exception):
    """Base class for every domain error raised by the library."""

    exit_code = 1

    def to_error_info(self, command: str = "unknown") -> Dict[str, Any]:
        return {
            "error": True,
            "type": type(self).__name__,
            "message": str(self),
            "command": command,
        }


class DimensionError(EgoPromptError):
    pass


class ParameterError(EgoPromptError):
    pass


class DegenerateInputError(EgoPromptError):
    pass


class LabelError(EgoPromptError):
    pass


class TemplateError(EgoPromptError):
    pass


class NonFiniteError(EgoPromptError):
    pass


class SpecError(EgoPromptError):
    pass


class DivergenceError(EgoPromptError):
    pass


class ReportError(EgoPromptError):
    pass


class UsageError(EgoPromptError):
    exit_code = 2


class ConfigError(EgoPromptError):
    exit_code = 2

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class CheckpointError(EgoPromptError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass
