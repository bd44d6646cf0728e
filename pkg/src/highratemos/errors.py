"""Exception hierarchy shared by all highratemos modules."""


class HRMError(Exception):
    """Base class; the CLI turns these into one-line error reports."""

    kind = "error"


class SchemaError(HRMError):
    kind = "schema"


class ValidationError(HRMError, ValueError):
    kind = "validation"


class UnsupportedFormatError(HRMError):
    kind = "unsupported-format"


class TooShortError(HRMError, ValueError):
    kind = "too-short"


class ConfigError(HRMError, ValueError):
    kind = "config"


class EncoderUnavailableError(HRMError):
    kind = "encoder-unavailable"


class CheckpointError(HRMError):
    kind = "checkpoint"


class DivergenceError(HRMError):
    kind = "divergence"

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss!r}")
        self.step = step
        self.loss = loss
