"""Exception hierarchy shared by every stage of a screening run."""

from __future__ import annotations


class AMIError(Exception):
    """Base class for all errors raised by the package."""


class PlaybookError(AMIError):
    """Playbook file could not be parsed or failed validation."""


class ConfigurationError(AMIError):
    """Invalid run configuration, missing credentials, or inconsistent backends."""


class TransportError(AMIError):
    """A remote endpoint could not be reached or answered with a failure."""


class RateLimitError(TransportError):
    """The provider refused the request because a quota was exceeded.

    Retryable: callers may back off and try again.
    """


class SnapshotMissError(AMIError):
    """A replayed snapshot has no entry for the requested key."""

    def __init__(self, query: str):
        super().__init__(f"query not present in snapshot: {query!r}")
        self.query = query


class SnapshotFormatError(AMIError):
    """Snapshot file is unreadable, corrupted, or of an unsupported version."""


class EmbeddingError(AMIError):
    """Embedding backend failed for a specific chunk or query."""


class NoChunksError(AMIError):
    """Retrieval was attempted against an index holding no usable chunks."""


class ScoreParseError(AMIError):
    """Model output could not be parsed into a score after all repair attempts."""

    def __init__(self, message: str, raw: str, retries_used: int):
        super().__init__(message)
        self.raw = raw
        self.retries_used = retries_used


class NoEvidenceError(AMIError):
    """Verdict requested without a single successful assessment."""


class DatasetError(AMIError):
    """Population file is malformed."""


class FixtureError(AMIError):
    """Simulation corpus manifest does not match the files on disk."""
