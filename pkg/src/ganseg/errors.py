"""Exception types shared across the package."""


class GansegError(Exception):
    """Base class for all package errors."""


class ArchiveError(GansegError):
    """Malformed, truncated, or inconsistent tensor archive."""


class ShapeError(GansegError):
    """Tensor shape or dimension mismatch."""


class SelectionError(GansegError):
    """Layer selection resolves to nothing or references unknown layers."""


class AnnotationError(GansegError):
    """Invalid part annotation (bad class index, bad file, shape mismatch)."""


class InversionError(GansegError):
    """Latent optimization failed (non-finite loss, bad input)."""


class DatasetError(GansegError):
    """Dataset rendering, manifest, or file integrity problem."""


class TrainingError(GansegError):
    """Invalid training configuration or data."""


class ProjectError(GansegError):
    """Project config or missing-artifact problem; `artifact` names what is missing."""

    def __init__(self, message, artifact=None):
        super().__init__(message)
        self.artifact = artifact
