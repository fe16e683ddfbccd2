"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor/image shapes are incompatible for the requested operation."""


class FormatError(ValueError):
    """Malformed external data (PPM payloads, manifests, ...)."""


class ConfigError(ValueError):
    """Invalid configuration file or option value."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated, or has the wrong version."""


class TrainingDiverged(RuntimeError):
    """A loss term went non-finite during training.

    Carries the per-term loss values of the offending step so the failure
    can be diagnosed without rerunning.
    """

    def __init__(self, message, term_values=None):
        super().__init__(message)
        self.term_values = dict(term_values or {})
