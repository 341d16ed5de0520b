"""
Color palette: K-Means fitting, quantization and the palette file format.

A palette is the discrete visual vocabulary of the model. Fitting runs weighted
Lloyd iterations over the distinct colors of a corpus with k-means++ seeding, so
corpora with many repeated pixels cost no more than their distinct colors.
"""

import hashlib
import struct
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
from loguru import logger

from retcomplete.errors import VocabularyError
from retcomplete.rng import stream

PALETTE_MAGIC = b"RCPAL1"
_ASSIGN_CHUNK = 8192


class Palette:
    """
    Immutable ordered set of k distinct RGB centroids in [0,1]^3.

    Centroids are rounded to 32-bit floats (the file precision) and kept in
    lexicographic order, so equal palettes serialize to identical bytes.
    """

    __slots__ = ("_centroids",)

    def __init__(self, centroids: np.ndarray) -> None:
        values = np.asarray(centroids, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != 3 or values.shape[0] < 1:
            raise VocabularyError(f"palette centroids must have shape (k, 3), got {values.shape}")
        values = values.astype(np.float32).astype(np.float64)
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise VocabularyError("palette centroids must lie in [0, 1]^3")
        values = values[np.lexsort((values[:, 2], values[:, 1], values[:, 0]))]
        if len(np.unique(values, axis=0)) != len(values):
            raise VocabularyError("palette centroids must be pairwise distinct")
        values.setflags(write=False)
        self._centroids = values

    def __repr__(self) -> str:
        return f"Palette(k={self.k})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Palette):
            return NotImplemented
        return np.array_equal(self._centroids, other._centroids)

    def __hash__(self) -> int:
        return hash(self._centroids.tobytes())

    @property
    def k(self) -> int:
        return int(self._centroids.shape[0])

    @property
    def centroids(self) -> np.ndarray:
        return self._centroids

    def quantize(self, img: np.ndarray) -> np.ndarray:
        return quantize(img, self)

    def dequantize(self, indices: np.ndarray) -> np.ndarray:
        return dequantize(indices, self)

    def to_bytes(self) -> bytes:
        return PALETTE_MAGIC + struct.pack("<I", self.k) + self._centroids.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Palette":
        if len(data) < 10 or data[:6] != PALETTE_MAGIC:
            raise VocabularyError("not a palette file (bad magic)")
        (k,) = struct.unpack("<I", data[6:10])
        expected = 10 + 12 * k
        if len(data) != expected:
            raise VocabularyError(
                f"palette file has {len(data)} bytes, expected {expected} for k={k}"
            )
        return cls(np.frombuffer(data[10:], dtype="<f4").reshape(k, 3))

    def digest(self) -> str:
        """SHA-256 of the serialized palette."""
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        logger.debug("Saved palette", path=str(path), k=self.k)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Palette":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise VocabularyError(f"cannot read palette file {path}: {exc}") from exc
        return cls.from_bytes(data)


class KMeansResult(NamedTuple):
    """Outcome of a K-Means fit. `inertia` holds one value per Lloyd iteration."""

    palette: Palette
    inertia: List[float]
    iterations: int
    converged: bool


def _nearest(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest centroid; ties go to the lowest index."""
    labels = np.empty(len(points), dtype=np.int64)
    dist2 = np.empty(len(points), dtype=np.float64)
    for start in range(0, len(points), _ASSIGN_CHUNK):
        block = points[start : start + _ASSIGN_CHUNK]
        d2 = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        labels[start : start + len(block)] = idx
        dist2[start : start + len(block)] = d2[np.arange(len(block)), idx]
    return labels, dist2


def _kmeanspp(
    points: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    n = len(points)
    first = rng.choice(n, p=weights / weights.sum())
    centers = [points[first]]
    closest = ((points - points[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        scores = weights * closest
        pick = int(rng.choice(n, p=scores / scores.sum()))
        centers.append(points[pick])
        closest = np.minimum(closest, ((points - points[pick]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def kmeans(
    pixels: np.ndarray,
    k: int,
    max_iters: int = 100,
    seed: int = 0,
) -> KMeansResult:
    """
    Fit a k-color palette with Lloyd's algorithm.

    Args:
        pixels: RGB values in [0,1], any shape ending in 3
        k: Number of centroids
        max_iters: Upper bound on Lloyd iterations
        seed: Seed of the k-means++ initialisation

    Returns:
        KMeansResult with the sorted palette and the per-iteration inertia

    Raises:
        VocabularyError: If the data has fewer than k distinct colors
    """
    data = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if k < 1:
        raise VocabularyError(f"k must be at least 1, got {k}")
    points, counts = np.unique(data, axis=0, return_counts=True)
    if len(points) < k:
        raise VocabularyError(f"corpus has {len(points)} distinct colors, fewer than k={k}")
    weights = counts.astype(np.float64)
    rng = stream(seed, "palette")

    centroids = _kmeanspp(points, weights, k, rng)
    inertia: List[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        labels, dist2 = _nearest(points, centroids)
        inertia.append(float((weights * dist2).sum()))

        sums = np.zeros((k, 3))
        np.add.at(sums, labels, points * weights[:, None])
        totals = np.bincount(labels, weights=weights, minlength=k)
        updated = centroids.copy()
        filled = totals > 0
        updated[filled] = sums[filled] / totals[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            farthest = np.argsort(-dist2, kind="stable")[: empty.size]
            updated[empty] = points[farthest]
            logger.debug("Reseeded empty clusters", count=int(empty.size), iteration=iterations)

        if np.array_equal(updated, centroids):
            converged = True
            break
        centroids = updated

    if not converged and max_iters > 0:
        _, dist2 = _nearest(points, centroids)
        inertia.append(float((weights * dist2).sum()))

    centroids = np.clip(centroids, 0.0, 1.0)
    logger.info(
        "K-Means finished",
        k=k,
        iterations=iterations,
        converged=converged,
        inertia=inertia[-1] if inertia else None,
    )
    return KMeansResult(Palette(centroids), inertia, iterations, converged)


def fit_kmeans(pixels: np.ndarray, k: int, max_iters: int = 100, seed: int = 0) -> Palette:
    """Fit a palette; see `kmeans` for the details and the inertia history."""
    return kmeans(pixels, k, max_iters=max_iters, seed=seed).palette


def quantize(img: np.ndarray, palette: Palette) -> np.ndarray:
    """
    Map every pixel to the index of its nearest centroid (Euclidean RGB).

    Equidistant pixels take the lowest index.
    """
    values = np.asarray(img, dtype=np.float64)
    if values.shape[-1] != 3:
        raise VocabularyError(f"quantize expects RGB values, got shape {values.shape}")
    labels, _ = _nearest(values.reshape(-1, 3), palette.centroids)
    return labels.reshape(values.shape[:-1])


def dequantize(indices: np.ndarray, palette: Palette) -> np.ndarray:
    """
    Replace palette indices by their centroid colors.

    Raises:
        VocabularyError: If an index is outside [0, k)
    """
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= palette.k):
        raise VocabularyError(f"palette index outside [0, {palette.k})")
    return palette.centroids[idx.astype(np.int64)]


def quantization_mse(
    pixels: np.ndarray, palette: Palette, weights: Optional[np.ndarray] = None
) -> float:
    """Mean squared RGB error of quantizing `pixels` with `palette`."""
    data = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    _, dist2 = _nearest(data, palette.centroids)
    return float(np.average(dist2, weights=weights))
