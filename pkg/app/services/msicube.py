import numpy as np
import scipy.ndimage
import structlog

from app.models.model import FilterMode
from app.models.spectral import DarkFrame, Provenance, SignatureSet, SpectralCube, WindowSpec
from app.utils.errors import ConfigurationError, DimensionMismatchError, ProvenanceError, WindowBoundsError

logger = structlog.get_logger(__name__)


def _require_stage(cube: SpectralCube, stage: Provenance, operation: str) -> None:
    if cube.provenance != stage:
        raise ProvenanceError(f"{operation} expects a {stage.name.lower()} cube, got {cube.provenance.name.lower()}")


# =============================================================================
# DARK-CURRENT REMOVAL
# =============================================================================

def subtract_dark(cube: SpectralCube, dark: DarkFrame) -> SpectralCube:
    """P = max(S - D, 0) per band."""
    _require_stage(cube, Provenance.RAW, "dark-current subtraction")
    if dark.shape != cube.pixels.shape:
        raise DimensionMismatchError(
            f"dark-current subtraction: dark frame {dark.shape} does not match cube {cube.pixels.shape}"
        )
    corrected = np.maximum(cube.pixels - dark.pixels, 0.0)
    logger.debug("dark_subtracted", shape=list(cube.pixels.shape), clamped=int(np.sum(cube.pixels < dark.pixels)))
    return cube.with_pixels(corrected, Provenance.DARK_SUBTRACTED)


# =============================================================================
# WINDOWED FILTERING
# =============================================================================

def _filter_pixels(pixels: np.ndarray, half_width: int, mode: FilterMode) -> np.ndarray:
    size = (2 * half_width + 1, 2 * half_width + 1, 1)
    if half_width == 0:
        return pixels.copy()
    if mode == "mean":
        # out-of-bounds pixels contribute zero to the sum and are left out of the count
        sums = scipy.ndimage.uniform_filter(pixels, size=size, mode="constant", cval=0.0)
        counts = scipy.ndimage.uniform_filter(np.ones(pixels.shape[:2] + (1,)), size=size, mode="constant", cval=0.0)
        return sums / counts
    if mode == "median":
        return scipy.ndimage.generic_filter(pixels, np.nanmedian, size=size, mode="constant", cval=np.nan)
    raise ConfigurationError(f"unknown filter mode {mode!r}")


def _check_half_width(cube: SpectralCube, half_width: int) -> None:
    if half_width < 0:
        raise WindowBoundsError("filter half-width must be nonnegative")
    if 2 * half_width + 1 > min(cube.height, cube.width):
        raise WindowBoundsError(
            f"filter window {2 * half_width + 1} exceeds image {cube.height}x{cube.width}"
        )


def window_filter(cube: SpectralCube, half_width: int, mode: FilterMode = "mean") -> SpectralCube:
    """Replace each pixel by the mean (or median) of its in-bounds (2w+1)^2 neighbourhood."""
    _require_stage(cube, Provenance.DARK_SUBTRACTED, "window filtering")
    _check_half_width(cube, half_width)
    filtered = _filter_pixels(cube.pixels, half_width, mode)
    return cube.with_pixels(filtered, Provenance.FILTERED)


def crop_cube(cube: SpectralCube, window: WindowSpec) -> SpectralCube:
    window.check_bounds(cube.height, cube.width)
    rows, cols = window.slices
    return cube.with_pixels(cube.pixels[rows, cols, :], cube.provenance)


def filter_region(cube: SpectralCube, window: WindowSpec, half_width: int, mode: FilterMode = "mean") -> SpectralCube:
    """Filter only the window plus a half-width margin, then crop to the window.

    Equal to ``crop_cube(window_filter(cube, ...), window)`` for either mode.
    """
    _require_stage(cube, Provenance.DARK_SUBTRACTED, "window filtering")
    _check_half_width(cube, half_width)
    window.check_bounds(cube.height, cube.width)

    top = max(window.row - half_width, 0)
    left = max(window.col - half_width, 0)
    bottom = min(window.row + window.side + half_width, cube.height)
    right = min(window.col + window.side + half_width, cube.width)
    region = cube.pixels[top:bottom, left:right, :]

    filtered = _filter_pixels(region, half_width, mode)
    r0, c0 = window.row - top, window.col - left
    cropped = filtered[r0 : r0 + window.side, c0 : c0 + window.side, :]
    return cube.with_pixels(cropped, Provenance.FILTERED)


# =============================================================================
# SIGNATURES
# =============================================================================

def crop_signatures(cube: SpectralCube, window: WindowSpec, trial: int = -1, reheat_class: int = -1) -> SignatureSet:
    """side^2 B-vectors read row-major over the window."""
    _require_stage(cube, Provenance.FILTERED, "signature cropping")
    window.check_bounds(cube.height, cube.width)
    rows, cols = window.slices
    values = cube.pixels[rows, cols, :].reshape(-1, cube.band_count)
    return SignatureSet(values=values, trials=trial, classes=reheat_class)


def preprocess(
    cube: SpectralCube,
    dark: DarkFrame,
    window: WindowSpec,
    half_width: int,
    mode: FilterMode = "mean",
    trial: int = -1,
    reheat_class: int = -1,
) -> SignatureSet:
    """Dark subtraction, filtering around the window, and cropping in one pass."""
    logger.info(
        "preprocess_starting",
        shape=list(cube.pixels.shape),
        window=[window.row, window.col, window.side],
        half_width=half_width,
        mode=mode,
    )
    corrected = subtract_dark(cube, dark)
    filtered = filter_region(corrected, window, half_width, mode)
    signatures = crop_signatures(filtered, WindowSpec(0, 0, window.side), trial, reheat_class)
    logger.info("preprocess_complete", signatures=len(signatures))
    return signatures
