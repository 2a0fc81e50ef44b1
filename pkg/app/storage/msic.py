"""MSIC binary cube container.

Layout (little-endian)::

    b"MSIC"  u16 version  u32 H  u32 W  u16 B  u16 bit_depth  u8 provenance
    B x f32 peak wavelengths
    H*W*B x f32 intensities, band-major (band, row, col)
"""
import struct
from pathlib import Path

import numpy as np
import structlog

from app.models.spectral import BandPlan, DarkFrame, Provenance, SpectralCube
from app.utils.errors import CubeFormatError

logger = structlog.get_logger(__name__)

MAGIC = b"MSIC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIHHB")


def encode_cube(cube: SpectralCube) -> bytes:
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        cube.height,
        cube.width,
        cube.band_count,
        cube.bit_depth,
        int(cube.provenance),
    )
    peaks = np.asarray(cube.band_plan.peaks_nm, dtype="<f4").tobytes()
    payload = np.ascontiguousarray(np.transpose(cube.pixels, (2, 0, 1)), dtype="<f4").tobytes()
    return header + peaks + payload


def decode_cube(data: bytes, source: str = "<bytes>") -> SpectralCube:
    if len(data) < _HEADER.size:
        raise CubeFormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, height, width, bands, bit_depth, provenance = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CubeFormatError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CubeFormatError(f"{source}: unsupported MSIC version {version}")
    try:
        provenance = Provenance(provenance)
    except ValueError as e:
        raise CubeFormatError(f"{source}: unknown provenance code {provenance}") from e
    if height == 0 or width == 0 or bands == 0:
        raise CubeFormatError(f"{source}: empty cube {height}x{width}x{bands}")

    offset = _HEADER.size
    expected = offset + 4 * bands + 4 * height * width * bands
    if len(data) != expected:
        raise CubeFormatError(f"{source}: expected {expected} bytes, found {len(data)}")

    peaks = np.frombuffer(data, dtype="<f4", count=bands, offset=offset).astype(np.float64)
    offset += 4 * bands
    payload = np.frombuffer(data, dtype="<f4", count=height * width * bands, offset=offset)
    pixels = payload.reshape(bands, height, width).transpose(1, 2, 0).astype(np.float64)

    try:
        band_plan = BandPlan(tuple(float(p) for p in peaks))
        return SpectralCube(pixels=pixels, band_plan=band_plan, bit_depth=bit_depth, provenance=provenance)
    except ValueError as e:
        raise CubeFormatError(f"{source}: {e}") from e


def save_cube(cube: SpectralCube, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_cube(cube))
    logger.info("file_saved", path=str(path), kind="msic", shape=list(cube.pixels.shape))
    return path


def load_cube(path: Path) -> SpectralCube:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CubeFormatError(f"cannot read cube file {path}: {e}") from e
    cube = decode_cube(data, source=str(path))
    logger.info("cube_loaded", path=str(path), shape=list(cube.pixels.shape), provenance=cube.provenance.name)
    return cube


def load_dark(path: Path) -> DarkFrame:
    """Dark frames share the container; the provenance byte is ignored."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CubeFormatError(f"cannot read dark frame {path} for dark-current subtraction: {e}") from e
    cube = decode_cube(data, source=str(path))
    return DarkFrame(pixels=cube.pixels)
