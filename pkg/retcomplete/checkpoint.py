"""
Checkpoint container shared by the Bi-RetNet and the upsampler.

Layout (all integers little-endian):

    b"RCKPT1"
    u32 header length, UTF-8 JSON header (sorted keys): kind, dtype, config,
        palette_sha256, meta
    u32 array count
    per array: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
        raw data in the header dtype

Files are written to a temporary sibling and renamed into place.
"""

import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from loguru import logger

from retcomplete.errors import CheckpointError
from retcomplete.tensor_core import get_dtype

CHECKPOINT_MAGIC = b"RCKPT1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class Checkpoint:
    """
    In-memory checkpoint.

    Attributes:
        kind: "biretnet" or "upsampler"
        config: JSON-compatible model config
        arrays: Named parameter and optimizer arrays
        meta: Free-form JSON metadata (training step, palette k, ...)
        palette_sha256: Digest of the palette the model was trained with, if any
        dtype: "float32" or "float64"
    """

    def __init__(
        self,
        kind: str,
        config: Dict[str, Any],
        arrays: Dict[str, np.ndarray],
        meta: Optional[Dict[str, Any]] = None,
        palette_sha256: Optional[str] = None,
        dtype: Optional[str] = None,
    ) -> None:
        self.kind = kind
        self.config = config
        self.arrays = arrays
        self.meta = meta or {}
        self.palette_sha256 = palette_sha256
        self.dtype = dtype or get_dtype().name
        if self.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported checkpoint dtype {self.dtype}")

    def __repr__(self) -> str:
        return f"Checkpoint(kind={self.kind}, arrays={len(self.arrays)}, dtype={self.dtype})"

    def header(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "dtype": self.dtype,
            "config": self.config,
            "palette_sha256": self.palette_sha256,
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [
            CHECKPOINT_MAGIC,
            struct.pack("<I", len(header)),
            header,
            struct.pack("<I", len(self.arrays)),
        ]
        code = _DTYPES[self.dtype]
        for name in sorted(self.arrays):
            array = np.ascontiguousarray(self.arrays[name], dtype=code)
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<B", array.ndim))
            parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
            parts.append(array.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        reader = _Reader(data, source)
        if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{source} is not a checkpoint (bad magic)")
        (header_len,) = reader.unpack("<I")
        try:
            header = json.loads(reader.take(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{source} has a corrupt header: {exc}") from exc
        dtype = header.get("dtype")
        if dtype not in _DTYPES:
            raise CheckpointError(f"{source} has unsupported dtype {dtype}")
        code = np.dtype(_DTYPES[dtype])
        (count,) = reader.unpack("<I")
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            (ndim,) = reader.unpack("<B")
            shape: Tuple[int, ...] = reader.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            raw = reader.take(size * code.itemsize)
            array = np.frombuffer(raw, dtype=code).reshape(shape)
            arrays[name] = array.astype(code.newbyteorder("="))
        if reader.remaining:
            raise CheckpointError(f"{source} has {reader.remaining} trailing bytes")
        return cls(
            kind=header.get("kind", ""),
            config=header.get("config", {}),
            arrays=arrays,
            meta=header.get("meta", {}),
            palette_sha256=header.get("palette_sha256"),
            dtype=dtype,
        )


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, count: int) -> bytes:
        if count > self.remaining:
            raise CheckpointError(f"{self.source} is truncated at byte {len(self.data)}")
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """
    Write a checkpoint atomically.

    Raises:
        CheckpointError: On any I/O failure, naming the path
    """
    path = Path(path)
    temp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        temp.write_bytes(checkpoint.to_bytes())
        os.replace(temp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.debug(
        "Saved checkpoint", path=str(path), kind=checkpoint.kind, arrays=len(checkpoint.arrays)
    )
    return path


def load_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Checkpoint:
    """
    Read a checkpoint, optionally insisting on its kind.

    Raises:
        CheckpointError: If the file is missing, unreadable, corrupt or of another kind
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    checkpoint = Checkpoint.from_bytes(data, source=str(path))
    if kind is not None and checkpoint.kind != kind:
        raise CheckpointError(f"{path} holds a '{checkpoint.kind}' checkpoint, expected '{kind}'")
    return checkpoint
