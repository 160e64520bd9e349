"""
Error types raised by the compact splatting pipeline.

Every error carries a machine-readable ``code`` so management commands can
report failures as a single JSON line on stderr.
"""

from typing import Any, Dict, Optional


class CompactSplatError(Exception):
    """
    Base class for all pipeline errors
    """
    code = 'compact_splat_error'

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': self.code,
            'message': self.message,
            'details': self.details,
        }


class PlyFormatError(CompactSplatError):
    code = 'ply_format'

    def __init__(self, message: str, missing_property: Optional[str] = None):
        super().__init__(message, {'missing_property': missing_property})
        self.missing_property = missing_property


class PlyTruncationError(CompactSplatError):
    code = 'ply_truncated'


class CameraError(CompactSplatError):
    code = 'camera_invalid'


class ImageError(CompactSplatError):
    code = 'image_invalid'


class ConfigError(CompactSplatError):
    code = 'config_invalid'

    def __init__(self, message: str, errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, {'errors': errors or {}})
        self.errors = errors or {}


class RvqError(CompactSplatError):
    code = 'rvq_invalid'


class CodecError(CompactSplatError):
    code = 'codec_error'


class ContainerError(CompactSplatError):
    code = 'container_invalid'


class TrainingDivergedError(CompactSplatError):
    code = 'training_diverged'

    def __init__(self, iteration: int, losses: Dict[str, float]):
        super().__init__(
            f"Non-finite loss at iteration {iteration}",
            {'iteration': iteration, 'losses': losses},
        )
        self.iteration = iteration
        self.losses = losses
