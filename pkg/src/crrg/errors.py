"""Exception types shared across the package."""


class DimensionError(ValueError):
    """A vector or grid has the wrong length/shape for the operation."""


class InputError(ValueError):
    """An argument violates the operation's precondition."""


class IntegrityError(ValueError):
    """A data source violates a uniqueness or consistency constraint."""


class MissingSectionError(ValueError):
    """A report lacks the FINDINGS section."""


class AugmentationError(RuntimeError):
    """A pluggable augmenter failed; carries the original text."""

    def __init__(self, message: str, original_text: str):
        super().__init__(message)
        self.original_text = original_text


class MetricUndefinedError(ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class FormatError(ValueError):
    """A checkpoint file is malformed, truncated, or has a bad version."""


class OrderingError(RuntimeError):
    """A pipeline stage was requested before its upstream stage completed."""

    def __init__(self, missing_stage: str):
        super().__init__(f"missing upstream checkpoint for stage '{missing_stage}'")
        self.missing_stage = missing_stage


class JoinError(ValueError):
    """Two keyed files do not align; carries the orphan keys."""

    def __init__(self, message: str, orphans):
        super().__init__(message)
        self.orphans = list(orphans)


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite function value."""
