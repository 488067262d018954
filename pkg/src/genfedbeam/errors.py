"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent architecture, experiment or run configuration."""


class InputError(ValueError):
    """Invalid argument values (histograms, grids, label distributions...)."""


class ProtocolError(RuntimeError):
    """Federated protocol contract violated (missing branch, bad upload)."""


class LoadError(ValueError):
    """Dataset file failed validation. ``row`` is the offending sample index."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DivergenceError(RuntimeError):
    """Training or generation produced a non-finite loss.

    ``report`` carries whatever partial results existed at the time.
    """

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
