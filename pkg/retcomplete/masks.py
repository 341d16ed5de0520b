"""
Mask generators for training and evaluation.

Masks are L x L uint8 grids where 1 marks a missing pixel. Stroke and rectangle
kinds are stamped until the coverage reaches exactly round(ratio * L^2) pixels.
The half kind masks floor(L^2 / 2) pixels on one side of a line through the centre
at a random angle.
"""

from typing import Iterator, Optional, Tuple

import numpy as np

from retcomplete.config import MaskKind, MaskSpec
from retcomplete.errors import UsageError
from retcomplete.rng import stream

_STROKE_KINDS = (MaskKind.RANDOM_STROKE, MaskKind.WIDE, MaskKind.NARROW)


def center_square(side: int, region: Optional[int] = None) -> np.ndarray:
    """Mask of the central region x region square (default side // 2)."""
    region = side // 2 if region is None else region
    if region < 1 or region > side:
        raise UsageError(f"center region {region} must be in [1, {side}]")
    mask = np.zeros((side, side), dtype=np.uint8)
    start = (side - region) // 2
    mask[start : start + region, start : start + region] = 1
    return mask


def _brush_radius(kind: MaskKind, side: int, brush: Optional[int]) -> int:
    if brush is not None:
        return brush
    if kind == MaskKind.NARROW:
        return 0
    if kind == MaskKind.WIDE:
        return max(1, side // 8)
    return max(1, side // 16)


def _disc_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    inside = dy * dy + dx * dx <= radius * radius
    return np.stack([dy[inside], dx[inside]], axis=1)


class _Stamper:
    """Adds pixels to a mask one at a time and stops exactly at the target count."""

    def __init__(self, side: int, target: int) -> None:
        self.mask = np.zeros((side, side), dtype=np.uint8)
        self.side = side
        self.target = target
        self.count = 0

    @property
    def full(self) -> bool:
        return self.count >= self.target

    def add(self, pixels: Iterator[Tuple[int, int]]) -> None:
        for y, x in pixels:
            if self.full:
                return
            if 0 <= y < self.side and 0 <= x < self.side and not self.mask[y, x]:
                self.mask[y, x] = 1
                self.count += 1


def _strokes(rng: np.random.Generator, side: int, target: int, radius: int) -> np.ndarray:
    stamper = _Stamper(side, target)
    disc = _disc_offsets(radius)
    step = max(1.0, float(radius))
    for _ in range(64 * side * side):
        if stamper.full:
            break
        y, x = rng.uniform(0, side, size=2)
        for _vertex in range(int(rng.integers(4, 13))):
            angle = rng.uniform(0.0, 2.0 * np.pi)
            length = int(rng.integers(1, max(2, side // 3) + 1))
            for _ in range(length):
                cy, cx = int(np.floor(y)), int(np.floor(x))
                stamper.add((cy + int(dy), cx + int(dx)) for dy, dx in disc)
                y = float(np.clip(y + step * np.sin(angle), 0, side - 1e-9))
                x = float(np.clip(x + step * np.cos(angle), 0, side - 1e-9))
            if stamper.full:
                break
    _fill_remaining(rng, stamper)
    return stamper.mask


def _rects(rng: np.random.Generator, side: int, target: int) -> np.ndarray:
    stamper = _Stamper(side, target)
    largest = max(1, side // 2)
    for _ in range(64 * side * side):
        if stamper.full:
            break
        h, w = rng.integers(1, largest + 1, size=2)
        top, left = int(rng.integers(0, side - h + 1)), int(rng.integers(0, side - w + 1))
        stamper.add((y, x) for y in range(top, top + h) for x in range(left, left + w))
    _fill_remaining(rng, stamper)
    return stamper.mask


def _fill_remaining(rng: np.random.Generator, stamper: _Stamper) -> None:
    if stamper.full:
        return
    free = np.argwhere(stamper.mask == 0)
    stamper.add((int(y), int(x)) for y, x in free[rng.permutation(len(free))])


def _half_plane(rng: np.random.Generator, side: int) -> np.ndarray:
    """Half of the grid on one side of a line through the centre at a random angle."""
    angle = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:side, 0:side] - (side - 1) / 2.0
    depth = (xx * np.cos(angle) + yy * np.sin(angle)).reshape(-1)
    count = max(1, side * side // 2)
    mask = np.zeros(side * side, dtype=np.uint8)
    mask[np.argsort(-depth, kind="stable")[:count]] = 1
    return mask.reshape(side, side)


def gen_mask(spec: MaskSpec, side: int) -> np.ndarray:
    """
    Generate an L x L mask grid.

    Args:
        spec: Generator kind and parameters
        side: Grid side L

    Returns:
        uint8 grid with 1 on masked pixels; identical for identical (spec, side)

    Raises:
        UsageError: If side < 1 or the parameters do not fit the grid
    """
    if side < 1:
        raise UsageError(f"mask side must be positive, got {side}")
    kind = MaskKind(spec.kind)
    rng = stream(spec.seed, "masks")

    if kind == MaskKind.CENTER:
        return center_square(side, spec.region)
    if kind == MaskKind.EXPAND:
        return (1 - center_square(side, spec.region)).astype(np.uint8)
    if kind == MaskKind.HALF:
        return _half_plane(rng, side)

    target = int(round(spec.ratio * side * side))
    if kind in _STROKE_KINDS:
        radius = _brush_radius(kind, side, spec.brush)
        if radius >= side:
            raise UsageError(f"brush radius {radius} does not fit a {side}x{side} grid")
        return _strokes(rng, side, target, radius)
    return _rects(rng, side, target)


def coverage(mask: np.ndarray) -> float:
    """Fraction of masked pixels."""
    return float(np.asarray(mask).mean())


def reduce_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """
    Shrink a full-resolution mask to an L x L grid.

    A low-resolution cell is masked when any full-resolution pixel inside it is.
    """
    full = (np.asarray(mask) > 0).astype(np.float64)
    if full.ndim != 2 or side > min(full.shape):
        raise UsageError(f"cannot reduce mask of shape {full.shape} to side {side}")
    rows = np.linspace(0, full.shape[0], side + 1).astype(int)
    cols = np.linspace(0, full.shape[1], side + 1).astype(int)
    out = np.zeros((side, side), dtype=np.uint8)
    for i in range(side):
        for j in range(side):
            out[i, j] = full[rows[i] : rows[i + 1], cols[j] : cols[j + 1]].max() > 0
    return out
