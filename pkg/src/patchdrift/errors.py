"""Exception types shared across the package."""


class PatchdriftError(Exception):
    """Base class for all package errors."""


class InvalidBoxError(PatchdriftError, ValueError):
    """Box with non-positive width or height."""


class SceneGenerationError(PatchdriftError, RuntimeError):
    """Instance packing failed within the retry budget."""


class DatasetLoadError(PatchdriftError, ValueError):
    """Manifest or image failed validation; message names the record."""


class DetectorContractError(PatchdriftError, ValueError):
    """Input violates the detector contract (wrong shape, bad range)."""


class NumericError(PatchdriftError, ArithmeticError):
    """Non-finite value produced where a finite one is required."""


class TrainingGateError(PatchdriftError, RuntimeError):
    """Training failed to reach the configured validation-mAP floor."""


class GridError(PatchdriftError, ValueError):
    """Instance box too small for the requested grid size."""


class SelectionError(PatchdriftError, ValueError):
    """Selection budget exceeds the number of available sub-patches."""


class MaskBoundsError(PatchdriftError, ValueError):
    """Selected sub-patch rect falls outside the image."""


class ConfigError(PatchdriftError, ValueError):
    """Run configuration failed validation."""


class CheckpointError(PatchdriftError, ValueError):
    """Model checkpoint is malformed or has incompatible shapes."""
