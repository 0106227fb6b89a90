"""Shared exception types."""


class StreamFormatError(ValueError):
    """A serialized stream is malformed. ``offset`` is the byte position of the
    first inconsistency when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncatedStreamError(StreamFormatError):
    """A stream ended before a complete record could be read."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
