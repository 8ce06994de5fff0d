"""Exception hierarchy shared by every rsjoint module."""

from pathlib import Path
from typing import Dict, Optional, Union


class RsJointError(Exception):
    """Base class for all errors raised by rsjoint."""


class ConfigurationError(RsJointError):
    """A configuration record or CLI flag violates its invariants."""


class DatasetError(RsJointError):
    """A dataset directory or image file could not be used."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None) -> None:
        super().__init__(message)
        self.path = Path(path) if path is not None else None


class AugmentationError(RsJointError):
    """An image cannot be fed to the augmentation pipeline."""


class NumericError(RsJointError):
    """Non-finite values appeared inside a network forward."""

    def __init__(self, message: str, layer: str) -> None:
        super().__init__(message)
        self.layer = layer


class ShapeMismatchError(RsJointError):
    """Two parameter collections disagree on a named tensor."""

    def __init__(self, message: str, name: str) -> None:
        super().__init__(message)
        self.name = name


class NonFiniteLossError(RsJointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, iteration: int, losses: Dict[str, float]) -> None:
        super().__init__(f"non-finite loss at iteration {iteration}: {losses}")
        self.iteration = iteration
        self.losses = losses


class CheckpointError(RsJointError):
    """Base class for checkpoint container failures."""

    code = "E_CHECKPOINT"


class CheckpointFormatError(CheckpointError):
    code = "E_FORMAT"


class CheckpointTruncatedError(CheckpointError):
    code = "E_TRUNCATED"


class CheckpointChecksumError(CheckpointError):
    code = "E_CHECKSUM"


class CheckpointVersionError(CheckpointError):
    code = "E_VERSION"
