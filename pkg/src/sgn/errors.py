"""Exception types shared across the package."""


class SgnError(Exception):
    """Base class for all package errors."""


class CorpusParseError(SgnError):
    """Corpus file is not valid JSON; message names the byte offset."""


class CorpusSchemaError(SgnError):
    """A corpus record is missing a required field; message names the record."""


class ConfigError(SgnError):
    """A configuration value is out of its allowed range."""


class AdjacencyShapeError(SgnError):
    """Adjacency bit sequence length is not a triangular number."""


class InvalidTreeError(SgnError):
    """Input does not describe a valid tree (bad row, cycle, disconnection)."""


class ComparabilityError(SgnError):
    """Two objects cannot be compared (leaf-count or eval-split mismatch)."""


class ShapeError(SgnError):
    """Tensor shapes are inconsistent with the module configuration."""


class CapacityError(SgnError):
    """Tree node count exceeds the configured maximum."""


class FeatureLookupError(SgnError):
    """Image key is unknown to the feature provider."""


class InputError(SgnError):
    """Operation received an empty or otherwise unusable input."""


class TrainingError(SgnError):
    """Training diverged; carries the last finite model state when available."""

    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state
