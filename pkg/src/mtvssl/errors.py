"""Exception types shared across the package."""


class MtvsslError(Exception):
    """Base class for package-specific failures."""


class ConfigError(MtvsslError):
    """Invalid configuration value, unknown key, or malformed manifest."""


class DataError(MtvsslError):
    """Video generation, clip sampling, or dataset ingestion failure."""


class ModelError(MtvsslError):
    """Model wiring or shape contract violation."""


class TeacherError(MtvsslError):
    """Teacher map unavailable, malformed, or misaligned."""


class CheckpointError(MtvsslError):
    """Corrupt or incompatible checkpoint file.

    ``offset`` is the byte offset at which reading failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDivergedError(MtvsslError):
    """A loss became non-finite; carries the offending batch ids."""

    def __init__(self, message: str, batch_ids: list[str] | None = None):
        super().__init__(message)
        self.batch_ids = batch_ids or []
