"""Exception hierarchy with CLI exit codes attached."""


class PopsynthError(Exception):
    """Base error; exit code 3 marks an internal invariant breach."""

    exit_code = 3


class ValidationError(PopsynthError):
    """Bad input: schemas, configs, files, mismatched supports."""

    exit_code = 1


class CheckpointError(ValidationError):
    """Checkpoint missing, corrupt, or incompatible with the run spec."""


class ProviderError(PopsynthError):
    """Provider-side failure: auth, refusal, exhausted retries."""

    exit_code = 2


class ProviderTransportError(ProviderError):
    """Retryable transport failure (timeouts, 5xx, connection errors)."""
