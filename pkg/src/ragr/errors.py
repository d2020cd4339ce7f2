"""Exception types shared across the pipeline."""


class RagrError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(RagrError):
    """Invalid configuration value or unknown config key."""


class EmptyDatasetError(RagrError):
    """An operation produced or received a dataset with no usable records."""


class FormatError(RagrError):
    """A binary or text artifact does not match its documented format."""


class ConsistencyError(RagrError):
    """Companion artifacts disagree (e.g. key count vs. row count)."""


class ValidationError(RagrError):
    """Data fails an invariant (NaN rows, duplicate keys, ...)."""


class ShapeError(RagrError):
    """Tensor or vector dimensions do not match a model's expectation."""


class TrainingError(RagrError):
    """Training diverged or hit a non-finite loss."""


class NumericError(RagrError):
    """A non-finite value appeared in a numeric computation."""


class LookupError_(RagrError):
    """A required key is missing from a SID map or similar table."""


class StageDependencyError(RagrError):
    """A pipeline stage was invoked before its prerequisite artifacts exist."""


class CatalogError(RagrError):
    """The item catalog (trie) is empty or internally inconsistent."""
