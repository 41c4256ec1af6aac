class FormatError(ValueError):
    """Malformed or unsupported file contents."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Invalid run configuration or manifest."""


class StructureMismatchError(ValueError):
    """Two parameter sets (or a checkpoint and a model) do not align."""
