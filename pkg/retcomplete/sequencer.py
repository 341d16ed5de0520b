"""
Image to token-sequence preprocessing.

Pipeline: area-average downsampling to L x L, palette quantization, raster-scan
flattening, and the input embedding X = FE(tokens, masked -> mask row) + PE.
"""

from typing import Tuple

import numpy as np

from retcomplete.errors import DimensionError, UsageError, VocabularyError
from retcomplete.masks import gen_mask  # noqa: F401  re-exported
from retcomplete.palette import Palette
from retcomplete.tensor_core import Tensor, add, gather


def _area_weights(size_in: int, size_out: int) -> np.ndarray:
    """Row i holds the overlap of each input cell with output cell i, normalised to 1."""
    edges = np.arange(size_out + 1) * (size_in / size_out)
    cells = np.arange(size_in)
    lo = np.maximum(edges[:-1, None], cells[None, :])
    hi = np.minimum(edges[1:, None], cells[None, :] + 1)
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def downsample(img: np.ndarray, side: int) -> np.ndarray:
    """
    Box-filter an H x W x C image down to side x side.

    Raises:
        UsageError: If side exceeds min(H, W) or is not positive
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise DimensionError(f"expected an H x W x C image, got shape {img.shape}")
    height, width = img.shape[:2]
    if side < 1 or side > min(height, width):
        raise UsageError(f"cannot downsample {height}x{width} to side {side}")
    rows = _area_weights(height, side)
    cols = _area_weights(width, side)
    return np.einsum("ih,hwc,jw->ijc", rows, img, cols)


class PixelSequence:
    """
    Raster-scan token and mask sequences of an L x L image.

    Position p is pixel (p // L, p % L). mask[p] == 1 marks a missing pixel.
    """

    __slots__ = ("tokens", "mask", "side")

    def __init__(self, tokens: np.ndarray, mask: np.ndarray, side: int) -> None:
        tokens = np.asarray(tokens).reshape(-1).astype(np.int64)
        mask = np.asarray(mask).reshape(-1)
        if tokens.size != side * side or mask.size != side * side:
            raise DimensionError(
                f"sequence of side {side} needs {side * side} tokens and mask entries, "
                f"got {tokens.size} and {mask.size}"
            )
        if not np.isin(mask, (0, 1)).all():
            raise UsageError("mask entries must be 0 or 1")
        if tokens.size and tokens.min() < 0:
            raise VocabularyError("token indices must be non-negative")
        self.tokens = tokens
        self.mask = mask.astype(np.uint8)
        self.side = int(side)

    def __repr__(self) -> str:
        return f"PixelSequence(side={self.side}, masked={self.n_masked})"

    @classmethod
    def from_grids(cls, token_grid: np.ndarray, mask_grid: np.ndarray) -> "PixelSequence":
        token_grid = np.asarray(token_grid)
        if token_grid.ndim != 2 or token_grid.shape[0] != token_grid.shape[1]:
            raise DimensionError(f"token grid must be square, got {token_grid.shape}")
        if np.asarray(mask_grid).shape != token_grid.shape:
            raise UsageError(
                f"mask grid shape {np.shape(mask_grid)} differs from {token_grid.shape}"
            )
        return cls(token_grid, mask_grid, token_grid.shape[0])

    @property
    def length(self) -> int:
        return self.side * self.side

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    def masked_positions(self) -> np.ndarray:
        """Masked positions in raster order."""
        return np.flatnonzero(self.mask)

    def position(self, p: int) -> Tuple[int, int]:
        return divmod(int(p), self.side)

    def token_grid(self) -> np.ndarray:
        return self.tokens.reshape(self.side, self.side)

    def mask_grid(self) -> np.ndarray:
        return self.mask.reshape(self.side, self.side)

    def with_tokens(self, tokens: np.ndarray) -> "PixelSequence":
        return PixelSequence(tokens, self.mask, self.side)


def to_sequence(img_low: np.ndarray, palette: Palette, mask_grid: np.ndarray) -> PixelSequence:
    """
    Quantize an L x L image and raster-scan it with its mask.

    Raises:
        UsageError: If the mask grid is not a binary L x L grid
    """
    img_low = np.asarray(img_low)
    mask_grid = np.asarray(mask_grid)
    if img_low.ndim != 3 or img_low.shape[0] != img_low.shape[1]:
        raise DimensionError(f"expected a square L x L x 3 image, got {img_low.shape}")
    if mask_grid.shape != img_low.shape[:2] or not np.isin(mask_grid, (0, 1)).all():
        raise UsageError(f"mask must be a binary {img_low.shape[0]}x{img_low.shape[1]} grid")
    return PixelSequence.from_grids(palette.quantize(img_low), mask_grid)


class EmbeddingTable:
    """
    Trainable color and position embeddings.

    Attributes:
        fe: [k+1, d] color features; the last row is the mask embedding
        pe: [L^2, d] learnable position encodings, shared by both towers
    """

    __slots__ = ("fe", "pe")

    def __init__(self, fe: Tensor, pe: Tensor) -> None:
        if fe.ndim != 2 or pe.ndim != 2 or fe.shape[1] != pe.shape[1]:
            raise DimensionError(f"embedding tables disagree: FE {fe.shape}, PE {pe.shape}")
        self.fe = fe
        self.pe = pe

    @property
    def palette_size(self) -> int:
        return self.fe.shape[0] - 1

    @property
    def mask_row(self) -> int:
        return self.fe.shape[0] - 1

    @property
    def d_model(self) -> int:
        return self.fe.shape[1]


def embed_indices(seq: PixelSequence, tables: EmbeddingTable) -> np.ndarray:
    """FE row used at every position: the token, or the mask row where masked."""
    if seq.tokens.size and seq.tokens.max() >= tables.palette_size:
        raise VocabularyError(f"token index outside palette of size {tables.palette_size}")
    if seq.length != tables.pe.shape[0]:
        raise DimensionError(
            f"sequence length {seq.length} differs from PE rows {tables.pe.shape[0]}"
        )
    return np.where(seq.mask == 1, tables.mask_row, seq.tokens)


def embed(seq: PixelSequence, tables: EmbeddingTable) -> Tensor:
    """
    Input embedding of a sequence, [L^2, d].

    Masked positions use the mask row of FE whatever token they hold.
    """
    return add(gather(tables.fe, embed_indices(seq, tables)), tables.pe)
