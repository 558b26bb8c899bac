# forceadapt/errors.py
from typing import Any, Dict, Optional


class ForceAdaptError(Exception):
    """Base class for every error raised by forceadapt."""


# --- Robot model ---

class ModelFormatError(ForceAdaptError):
    """The model file could not be parsed."""


class ModelValidationError(ForceAdaptError):
    """The model parsed but violates an invariant. `field` names the offender."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


# --- Force curriculum ---

class InfeasibleGravityError(ForceAdaptError):
    """Gravity torque alone already exceeds the joint torque limits."""


# --- Configuration ---

class ConfigError(ForceAdaptError):
    """Invalid or unknown configuration key. `key` is the dotted path."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


# --- Training ---

class NonFiniteError(ForceAdaptError):
    """A non-finite action or network output was produced."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingDivergedError(ForceAdaptError):
    """A PPO loss became NaN. `checkpoint_path` points at the emergency dump."""

    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


# --- Checkpoints ---

class CheckpointError(ForceAdaptError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Checkpoint was trained for a different robot model or mode."""
