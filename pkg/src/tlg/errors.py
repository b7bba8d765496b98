"""Exception types shared across the package."""


class TLGError(Exception):
    pass


class ConfigError(TLGError, ValueError):
    """Invalid configuration. ``diagnostics`` holds one line per problem."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        return base + "\n" + "\n".join("  " + d for d in self.diagnostics)


class DataValidationError(TLGError, ValueError):
    pass


class EpisodeSamplingError(TLGError, RuntimeError):
    pass


class MaskLoadError(TLGError, FileNotFoundError):
    pass


class PromptBankError(TLGError, ValueError):
    pass


class CheckpointError(TLGError, RuntimeError):
    pass


class NonFiniteLossError(TLGError, FloatingPointError):
    pass
