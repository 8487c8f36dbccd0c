"""Exception types shared across the toolkit."""


class FeaturemarkError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(FeaturemarkError, ValueError):
    """A dataset file or record violates the expected schema."""


class UnsupportedSchemaError(FeaturemarkError, ValueError):
    """A persisted artifact declares a schema version this build cannot read."""


class CorruptArtifactError(FeaturemarkError, ValueError):
    """A persisted artifact is truncated or structurally damaged."""


class AlignmentSingularError(FeaturemarkError, ValueError):
    """Feature alignment is rank deficient and ridge fallback was disabled."""


class TrainingDivergedError(FeaturemarkError, RuntimeError):
    """Training produced a non-finite loss. Carries the training manifest."""

    def __init__(self, message: str, manifest: dict | None = None):
        super().__init__(message)
        self.manifest = manifest or {}


class EmbeddingError(FeaturemarkError, RuntimeError):
    """Watermark embedding aborted (non-finite gradient or dim mismatch)."""


class QueryError(FeaturemarkError, RuntimeError):
    """A black-box prediction query failed. May carry partial progress."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial
