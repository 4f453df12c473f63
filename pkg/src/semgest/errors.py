"""Exception types shared across the pipeline."""


class SemgestError(Exception):
    """Base class for all pipeline errors."""


class BvhParseError(SemgestError):
    """Malformed BVH text; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnsupportedFormatError(SemgestError):
    """Input uses a channel set or encoding the pipeline does not handle."""


class PartitionError(SemgestError):
    """Body/hand partition is unusable (e.g. no body joints)."""


class TooShortError(SemgestError):
    """Input has too few frames/samples for the requested operation."""


class RankDeficiencyError(SemgestError):
    """Training windows have rank below the requested latent dimension."""

    def __init__(self, message: str, rank: int):
        super().__init__(message)
        self.rank = rank


class ConfigError(SemgestError):
    """Invalid or infeasible configuration value."""


class FingerprintMismatchError(SemgestError):
    """Tokens/latents are bound to a different codec than the one supplied."""


class AlignmentMismatchError(SemgestError):
    """Audio and motion durations disagree by more than one token frame."""


class NotFoundError(SemgestError):
    """Lookup key absent from the index; carries nearest-label suggestions."""

    def __init__(self, message: str, suggestions: list[str] | None = None):
        self.suggestions = list(suggestions or [])
        if self.suggestions:
            message = f"{message} (closest labels: {', '.join(self.suggestions)})"
        super().__init__(message)


class TransportError(SemgestError):
    """Remote service failure after exhausting retries."""

    def __init__(self, message: str, retries: int = 0):
        super().__init__(f"{message} (retries: {retries})")
        self.retries = retries


class ResponseFormatError(SemgestError):
    """Remote response could not be parsed; carries the raw text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class SequenceTooShortError(SemgestError):
    """Token sequence shorter than the segment that must be placed in it."""


class StaleArtifactError(SemgestError):
    """On-disk artifact was produced under a different config lineage."""
