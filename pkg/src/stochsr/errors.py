"""Exception types shared across the package."""


class StochSRError(Exception):
    """Base class for all package-specific errors."""


class DomainError(StochSRError, ValueError):
    """Input values outside the documented domain of an operation."""


class ShapeError(StochSRError, ValueError):
    """Array shapes inconsistent with an operation's contract."""


class ArchiveError(StochSRError, RuntimeError):
    """Base class for dataset-container problems."""


class MalformedHeaderError(ArchiveError):
    """Manifest text is missing, unparseable, or lacks required keys."""


class ShapeMismatchError(ArchiveError):
    """Shard file size or array shape disagrees with the manifest."""


class UnsupportedVersionError(ArchiveError):
    """Manifest schema version is not supported by this reader."""


class WeightFormatError(StochSRError, RuntimeError):
    """Weight container unreadable or written for a different network config."""


class TrainingError(StochSRError, RuntimeError):
    """Numerical failure during training; carries the step it happened at."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (at step {step})")
        self.step = step
