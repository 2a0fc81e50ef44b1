"""Exception hierarchy.

InputDataError subclasses describe something wrong with what the caller handed
in (files, shapes, labels, configuration); the CLI maps them to exit code 2.
ComputationError subclasses describe a numerical step that could not finish;
the CLI maps them to exit code 1.
"""


class OilScanError(Exception):
    """Base class for every error raised by this package."""


class InputDataError(OilScanError, ValueError):
    exit_code = 2


class ComputationError(OilScanError, RuntimeError):
    exit_code = 1


# =============================================================================
# INPUT ERRORS
# =============================================================================

class DimensionMismatchError(InputDataError):
    pass


class ProvenanceError(InputDataError):
    """A cube was handed to a preprocessing stage out of order."""


class WindowBoundsError(InputDataError):
    pass


class CubeFormatError(InputDataError):
    pass


class PixelRangeError(InputDataError):
    """Intensities outside what the sensor can record."""


class NonFiniteInputError(InputDataError):
    pass


class InsufficientDataError(InputDataError):
    pass


class LabelError(InputDataError):
    """Missing or out-of-range trial / reheat-class labels."""


class ConfigurationError(InputDataError):
    pass


# =============================================================================
# COMPUTATION ERRORS
# =============================================================================

class NotPositiveDefiniteError(ComputationError):
    pass


class SingularScatterError(ComputationError):
    pass


class EigensolverError(ComputationError):
    def __init__(self, message: str, sigma: float | None = None) -> None:
        super().__init__(message if sigma is None else f"{message} (sigma={sigma:g})")
        self.sigma = sigma


class ClusteringError(ComputationError):
    pass


class EmptyClusterError(ClusteringError):
    """k-means converged with fewer distinct clusters than requested."""
