"""Exception hierarchy shared by every cardiolabel module."""


class CardioLabelError(Exception):
    """Base class for every error raised on purpose by this package."""


class IngestionError(CardioLabelError, ValueError):
    """Raised when an audio, segmentation, label or manifest file cannot be read.

    Args:
        message (str): Diagnostic text.
        source (str, optional): File name or description of the payload.
        row (int, optional): 1-based row number of the offending line.
    """

    def __init__(self, message: str, source: str = "", row: int = 0):
        self.source = source
        self.row = row
        prefix = ""
        if source:
            prefix += f"{source}: "
        if row:
            prefix += f"row {row}: "
        super().__init__(f"{prefix}{message}")


class LabelError(CardioLabelError, ValueError):
    """Raised for out-of-range or inconsistent label values."""


class ShapeError(CardioLabelError, ValueError):
    """Raised for tensor or parameter shape mismatches."""


class ConfigError(CardioLabelError, ValueError):
    """Raised for invalid configuration files or values."""


class StoreError(CardioLabelError, ValueError):
    """Raised when a prepared sample store is malformed."""


class CheckpointError(CardioLabelError):
    """Raised for corrupt, incompatible or wrongly versioned checkpoints."""


class TrainingError(CardioLabelError):
    """Raised when training produces non-finite gradients or losses."""
