"""Error types shared across the package."""


class FoldkitError(Exception):
    """Base class for all package errors."""


class ShapeError(FoldkitError):
    """Tensor shape incompatible with a block; carries the offending block path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"block {path}: {message}")


class ModelFormatError(FoldkitError):
    """Malformed or truncated serialized model/dataset file."""


class ValidationError(FoldkitError):
    """Contract violation in an operation's inputs."""
