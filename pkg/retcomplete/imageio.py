"""
Image and mask files.

PNG goes through Pillow. Binary Netpbm (P6 colour, P5 grey) is parsed and
written here directly and serves as the reference format in tests. Images are
float arrays in [0,1], H x W x 3; masks are H x W uint8 with 1 on missing pixels.
"""

import io
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from loguru import logger
from PIL import Image, UnidentifiedImageError

from retcomplete.errors import DimensionError, ImageIOError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
NETPBM_MAGICS = {b"P5": 1, b"P6": 3}
SUFFIXES = (".png", ".ppm", ".pgm")
_WHITESPACE = b" \t\r\n\v\f"

PathLike = Union[str, Path]


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read image: {exc.strerror or exc}", path) from exc


class _NetpbmHeader:
    """Whitespace-separated header fields with `#` comments, tracking byte offsets."""

    def __init__(self, data: bytes, path: Path) -> None:
        self.data = data
        self.path = path
        self.pos = 2

    def _skip(self) -> None:
        while self.pos < len(self.data):
            byte = self.data[self.pos : self.pos + 1]
            if byte == b"#":
                end = self.data.find(b"\n", self.pos)
                self.pos = len(self.data) if end < 0 else end + 1
            elif byte in _WHITESPACE:
                self.pos += 1
            else:
                return

    def integer(self, field: str) -> int:
        self._skip()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos : self.pos + 1].isdigit():
            self.pos += 1
        if start == self.pos:
            raise ImageIOError(f"expected {field} in Netpbm header", self.path, start)
        value = int(self.data[start : self.pos])
        if value < 1:
            raise ImageIOError(f"Netpbm {field} must be positive, got {value}", self.path, start)
        return value


def _decode_netpbm(data: bytes, path: Path) -> np.ndarray:
    channels = NETPBM_MAGICS[data[:2]]
    header = _NetpbmHeader(data, path)
    width = header.integer("width")
    height = header.integer("height")
    maxval = header.integer("maxval")
    if maxval > 65535:
        raise ImageIOError(f"maxval {maxval} exceeds 65535", path, header.pos)
    if header.pos >= len(data) or data[header.pos : header.pos + 1] not in _WHITESPACE:
        raise ImageIOError("missing whitespace after maxval", path, header.pos)
    start = header.pos + 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    if len(data) - start < expected:
        raise ImageIOError(
            f"truncated raster: expected {expected} bytes, found {len(data) - start}",
            path,
            len(data),
        )
    raster = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=start)
    img = raster.reshape(height, width, channels).astype(np.float64) / maxval
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return np.clip(img, 0.0, 1.0)


def _decode_png(data: bytes, path: Path) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as handle:
            handle.load()
            rgb = handle.convert("RGB")
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"corrupt PNG: {exc}", path) from exc
    return np.asarray(rgb, dtype=np.float64) / 255.0


def load_image(path: PathLike) -> np.ndarray:
    """
    Decode a PNG or binary PPM/PGM file.

    Returns:
        H x W x 3 float64 array in [0,1]; alpha is dropped and grey is replicated

    Raises:
        ImageIOError: On unreadable, unsupported or corrupt files
    """
    path = Path(path)
    data = _read_bytes(path)
    if data.startswith(PNG_SIGNATURE):
        img = _decode_png(data, path)
    elif data[:2] in NETPBM_MAGICS:
        img = _decode_netpbm(data, path)
    else:
        raise ImageIOError("unsupported image format", path, 0)
    logger.debug("Image loaded", path=str(path), shape=img.shape)
    return img


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Round [0,1] floats to uint8 levels."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _encode(levels: np.ndarray, suffix: str, path: Path) -> bytes:
    height, width = levels.shape[:2]
    if suffix == ".png":
        buffer = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(levels)).save(buffer, format="PNG")
        return buffer.getvalue()
    if suffix == ".ppm":
        if levels.ndim == 2:
            levels = np.repeat(levels[..., None], 3, axis=2)
        return b"P6\n%d %d\n255\n" % (width, height) + levels.tobytes()
    if suffix == ".pgm":
        if levels.ndim == 3:
            raise ImageIOError("PGM output needs a single-channel image", path)
        return b"P5\n%d %d\n255\n" % (width, height) + levels.tobytes()
    allowed = ", ".join(SUFFIXES)
    raise ImageIOError(f"unsupported output suffix '{suffix}' (use one of {allowed})", path)


def save_image(img: np.ndarray, path: PathLike) -> Path:
    """
    Write an H x W x 3 (or H x W grey) image in [0,1]; the format follows the suffix.

    Raises:
        DimensionError: If the array is not an image
        ImageIOError: On an unsupported suffix or a write failure
    """
    path = Path(path)
    img = np.asarray(img)
    if not (img.ndim == 2 or (img.ndim == 3 and img.shape[2] == 3)):
        raise DimensionError(f"expected H x W or H x W x 3, got {img.shape}")
    payload = _encode(to_bytes(img), path.suffix.lower(), path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise ImageIOError(f"cannot write image: {exc.strerror or exc}", path) from exc
    logger.debug("Image saved", path=str(path), shape=img.shape)
    return path


def load_mask(path: PathLike, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Read a mask image: pixels whose mean level is at least 128 are missing (1).

    Raises:
        ImageIOError: If the file cannot be decoded
        DimensionError: If `shape` is given and does not match
    """
    levels = to_bytes(load_image(path)).astype(np.float64).mean(axis=2)
    mask = (levels >= 128.0).astype(np.uint8)
    if shape is not None and mask.shape != tuple(shape):
        raise DimensionError(f"mask {mask.shape} does not match image {tuple(shape)}")
    return mask


def save_mask(mask: np.ndarray, path: PathLike) -> Path:
    """Write a binary mask as black (known) and white (missing)."""
    return save_image(np.asarray(mask, dtype=np.float64), path)


def save_gray(values: np.ndarray, path: PathLike) -> Path:
    """Write a non-negative map scaled so its maximum is white."""
    values = np.asarray(values, dtype=np.float64)
    peak = float(values.max()) if values.size else 0.0
    return save_image(values / peak if peak > 0 else np.zeros_like(values), path)
