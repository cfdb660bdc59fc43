"""Exception hierarchy shared across the toolkit."""


class ShadowSegError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(ShadowSegError):
    """Inconsistent configuration or mismatched model/data dimensions."""


class InputError(ShadowSegError):
    """Invalid runtime input (bad shapes, empty lists, out-of-range values)."""


class AssetMissingError(ShadowSegError):
    """A required external asset (e.g. an encoder weight file) is absent."""

    def __init__(self, path, what="weight file"):
        self.path = str(path)
        super().__init__(f"missing {what}: {self.path}")


class DegenerateProjectionError(ShadowSegError):
    """A projected vector collapsed to (near-)zero norm; training is broken."""


class CheckpointMismatchError(ShadowSegError):
    """Checkpoint is incompatible with the requested configuration."""
