"""
Binary Netpbm image codec.

Reads and writes binary PGM (``P5``, grayscale) and PPM (``P6``, RGB) files as ``uint8``
numpy arrays. Headers may contain ``#`` comments. 16-bit samples (maxval > 255) are read
big-endian and rescaled to 8 bits; only 8-bit files are written.
"""

import logging
import re
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")
_CHANNELS = {b"P5": 1, b"P6": 3}


def _header(buffer: bytes, path: Path) -> Tuple[bytes, int, int, int, int]:
    tokens = []
    offset = 0
    for _ in range(4):
        match = _TOKEN.match(buffer, offset)
        if match is None:
            raise DataError(f"Truncated Netpbm header in {path}")
        tokens.append(match.group(1))
        offset = match.end()
    magic, width, height, maxval = tokens
    if magic not in _CHANNELS:
        raise DataError(f"Unsupported Netpbm format {magic!r} in {path} (expected P5 or P6)")
    try:
        w, h, m = int(width), int(height), int(maxval)
    except ValueError as e:
        raise DataError(f"Malformed Netpbm header in {path}: {e}") from e
    if w < 1 or h < 1 or not 0 < m < 65536:
        raise DataError(f"Invalid Netpbm dimensions {w}x{h}, maxval {m} in {path}")
    # exactly one whitespace byte separates the header from the raster
    return magic, w, h, m, offset + 1


def read_netpbm(path: Union[str, Path]) -> np.ndarray:
    """Decode a P5/P6 file into ``H x W`` (P5) or ``H x W x 3`` (P6) ``uint8`` pixels.

    Raises:
        DataError: If the file cannot be read or is not a well-formed binary PGM/PPM
    """
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read image {path}: {e}") from e
    magic, width, height, maxval, start = _header(buffer, path)
    channels = _CHANNELS[magic]
    samples = width * height * channels
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    raster = buffer[start : start + samples * dtype.itemsize]
    if len(raster) != samples * dtype.itemsize:
        raise DataError(
            f"Truncated raster in {path}: expected {samples * dtype.itemsize} bytes, "
            f"found {len(raster)}"
        )
    pixels = np.frombuffer(raster, dtype=dtype).astype(np.float64)
    if maxval != 255:
        pixels = np.round(pixels * (255.0 / maxval))
    shape = (height, width) if channels == 1 else (height, width, channels)
    return pixels.astype(np.uint8).reshape(shape)


def write_netpbm(path: Union[str, Path], pixels: np.ndarray) -> Path:
    """Encode ``uint8`` pixels as P5 (``H x W``) or P6 (``H x W x 3``)."""
    path = Path(path)
    if pixels.dtype != np.uint8:
        raise DataError(f"Netpbm writer expects uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"Cannot encode pixel array of shape {pixels.shape} as PGM/PPM")
    height, width = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (width, height)
    path.write_bytes(header + np.ascontiguousarray(pixels).tobytes())
    logger.debug("Wrote image", extra={"path": str(path), "shape": pixels.shape})
    return path
