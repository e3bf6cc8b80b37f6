"""Exception types raised by the splitnn package."""


class SplitnnError(Exception):
    """Base class for all package errors."""


class MalformedDataError(SplitnnError):
    """A cell could not be parsed and is not a declared missing marker."""


class EmptyDatasetError(SplitnnError):
    """No usable rows survived ingestion."""


class SchemaError(SplitnnError):
    """A schema file is missing, unreadable, or inconsistent with the data."""


class ShapeMismatchError(SplitnnError):
    """Array dimensions disagree with what an operation requires."""


class AllocationError(SplitnnError):
    """Hidden units cannot be apportioned (total smaller than branch count)."""


class DivergenceError(SplitnnError):
    """Training produced a non-finite loss, gradient, or parameter."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class EmptyTestSetError(SplitnnError):
    """The robustness protocol found no rows with missing features."""
