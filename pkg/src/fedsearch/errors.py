"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, protocol/round failures with 3, data problems with 4.
"""


class FedSearchError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FedSearchError):
    """Invalid configuration or contract violation at call time."""


class DimensionError(ConfigError):
    """Tensor shapes incompatible with the requested operation."""


class GraphError(ConfigError):
    """Invalid computation-graph usage (e.g. non-scalar backward root)."""


class TrainingError(FedSearchError):
    """Training diverged or was fed unusable inputs."""


class ProtocolError(FedSearchError):
    """Federation protocol violation (mixed rounds, bad layout, empty update set)."""


class RoundAbortError(ProtocolError):
    """A synchronous round could not collect every roster update."""


class DecodeError(FedSearchError):
    """Malformed bytes: bad magic, version, framing, or truncation."""


class DataError(FedSearchError):
    """Dataset-level problem: manifests, image files, generation."""


class ManifestError(DataError):
    """Malformed or inconsistent dataset manifest."""


class ImageLoadError(DataError):
    """Unreadable or unsupported image file."""


class FeatureIndexError(FedSearchError):
    """Feature index unusable: layout mismatch or empty build."""


class EvaluationError(FedSearchError):
    """Evaluation contract violation (e.g. query ids leaking into the index)."""
