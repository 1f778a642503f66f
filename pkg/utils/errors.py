"""
Exception and warning types shared by services, commands and the pipeline.
"""
from typing import Any, Dict, Optional


class LatentCadError(Exception):
    """Base class for every error raised by this project"""


class StlParseError(LatentCadError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class VoxelError(LatentCadError, ValueError):
    pass


class ShapeSpecError(LatentCadError, ValueError):
    pass


class ArchitectureError(LatentCadError, ValueError):
    pass


class ComparatorError(LatentCadError, ValueError):
    pass


class FidError(LatentCadError, ValueError):
    pass


class ConfigError(LatentCadError, ValueError):
    pass


class TrainingDivergedError(LatentCadError):
    """Raised when a training loss turns non-finite; `snapshot` describes the last sane state"""

    def __init__(self, message: str, snapshot: Dict[str, Any]):
        super().__init__(message)
        self.snapshot = snapshot


class InversionDivergedError(LatentCadError):
    def __init__(self, message: str, partial: Optional[Any] = None):
        super().__init__(message)
        self.partial = partial


class OptimizationDivergedError(LatentCadError):
    def __init__(self, message: str, partial: Optional[Any] = None):
        super().__init__(message)
        self.partial = partial


class StageFailed(LatentCadError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class NonWatertightWarning(UserWarning):
    pass


class ZeroVolumeWarning(UserWarning):
    pass
