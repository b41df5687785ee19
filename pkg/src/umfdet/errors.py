"""Shared exception types.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, anything else exits 3.
"""


class UmfdetError(Exception):
    """Base for all package-specific errors."""


class ShapeError(UmfdetError):
    """Tensor dimensions do not match an op's contract."""


class GraphError(UmfdetError):
    """Misuse of the autodiff graph (e.g. backward called twice)."""


class ConfigError(UmfdetError):
    """Invalid configuration value."""


class DataError(UmfdetError):
    """Malformed or inconsistent input data."""


class TemplateError(UmfdetError):
    """Prompt template missing a required placeholder or section."""


class ManifestError(DataError):
    """Manifest line failed to parse or violated an invariant."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TransportError(UmfdetError):
    """Generation client failed at the transport level after retries."""


class FabricationError(UmfdetError):
    """Text fabrication exhausted its regeneration budget."""


class NumericsError(UmfdetError):
    """Training hit a non-finite loss or gradient."""
