"""Unit tests for palette fitting and quantization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from retcomplete.errors import VocabularyError
from retcomplete.palette import (
    Palette,
    dequantize,
    fit_kmeans,
    kmeans,
    quantization_mse,
    quantize,
)

pytestmark = pytest.mark.unit


def brute_force(pixels: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = np.empty(len(pixels), dtype=np.int64)
    for i, p in enumerate(pixels):
        best, best_d = 0, np.inf
        for j, c in enumerate(centroids):
            d = float(((p - c) ** 2).sum())
            if d < best_d:
                best, best_d = j, d
        out[i] = best
    return out


class TestFit:
    def test_black_and_white(self):
        pixels = np.concatenate([np.zeros((100, 3)), np.ones((100, 3))])
        palette = fit_kmeans(pixels, 2, seed=0)
        np.testing.assert_array_equal(palette.centroids, [[0, 0, 0], [1, 1, 1]])

    def test_single_cluster_is_mean(self, rng):
        pixels = rng.random((50, 3))
        palette = fit_kmeans(pixels, 1)
        np.testing.assert_allclose(palette.centroids[0], pixels.mean(axis=0), atol=1e-6)

    def test_gaussian_blobs(self, rng):
        means = np.array([[0.2, 0.2, 0.2], [0.8, 0.2, 0.5], [0.4, 0.9, 0.7]])
        blobs = [np.clip(m + 0.02 * rng.standard_normal((300, 3)), 0, 1) for m in means]
        palette = fit_kmeans(np.concatenate(blobs), 3, seed=4)
        for blob in blobs:
            distances = np.linalg.norm(palette.centroids - blob.mean(axis=0), axis=1)
            assert distances.min() < 0.05

    def test_inertia_non_increasing(self, rng):
        result = kmeans(rng.random((2000, 3)), 8, max_iters=50, seed=1)
        history = np.array(result.inertia)
        assert np.all(np.diff(history) <= 1e-9)

    def test_too_few_colors(self):
        with pytest.raises(VocabularyError):
            fit_kmeans(np.zeros((10, 3)), 2)

    def test_deterministic(self, rng):
        pixels = rng.random((500, 3))
        assert fit_kmeans(pixels, 6, seed=9).to_bytes() == fit_kmeans(pixels, 6, seed=9).to_bytes()

    def test_more_colors_never_worse(self, rng):
        pixels = rng.random((400, 3))
        assert quantization_mse(pixels, fit_kmeans(pixels, 4)) <= quantization_mse(
            pixels, fit_kmeans(pixels, 1)
        )


class TestQuantize:
    def test_exact_centroids(self):
        palette = Palette(np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [1.0, 1.0, 1.0]]))
        img = palette.centroids[[[2, 0], [1, 1]]]
        np.testing.assert_array_equal(quantize(img, palette), [[2, 0], [1, 1]])

    def test_tie_goes_to_lowest_index(self):
        reds = [0.0, 0.125, 0.375, 0.4375, 0.5, 0.5625, 0.59375, 0.625]
        centroids = np.array([[r, 0.0, 0.0] for r in reds])
        centroids[[2, 7], 1:] = 0.5
        palette = Palette(centroids)
        assert quantize(np.array([[0.5, 0.5, 0.5]]), palette)[0] == 2

    def test_explicit_tie(self):
        palette = Palette(np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]))
        assert quantize(np.array([[0.25, 0.0, 0.0]]), palette)[0] == 0

    def test_matches_brute_force(self, rng):
        palette = Palette(rng.random((16, 3)))
        pixels = rng.random((10_000, 3))
        np.testing.assert_array_equal(
            quantize(pixels, palette), brute_force(pixels, palette.centroids)
        )

    def test_matches_brute_force_with_ties(self):
        levels = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        palette = Palette(np.stack([levels, levels, levels], axis=1))
        values = np.linspace(0.0, 1.0, 9)
        pixels = np.stack([values, values, values], axis=1)
        np.testing.assert_array_equal(
            quantize(pixels, palette), brute_force(pixels, palette.centroids)
        )

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (20, 3), elements=st.floats(0.0, 1.0)))
    def test_brute_force_property(self, pixels):
        palette = Palette(
            np.array([[0.1, 0.2, 0.3], [0.9, 0.1, 0.4], [0.5, 0.5, 0.5], [0.0, 1.0, 1.0]])
        )
        np.testing.assert_array_equal(
            quantize(pixels, palette), brute_force(pixels, palette.centroids)
        )


class TestDequantize:
    def test_zero_grid(self, rng):
        palette = Palette(rng.random((4, 3)))
        out = dequantize(np.zeros((3, 3), dtype=int), palette)
        np.testing.assert_array_equal(out, np.broadcast_to(palette.centroids[0], (3, 3, 3)))

    def test_round_trip(self, rng):
        palette = Palette(rng.random((12, 3)))
        grid = rng.integers(0, 12, size=(8, 8))
        np.testing.assert_array_equal(quantize(dequantize(grid, palette), palette), grid)

    def test_in_order(self, rng):
        palette = Palette(rng.random((4, 3)))
        np.testing.assert_array_equal(dequantize(np.arange(4), palette), palette.centroids)

    @pytest.mark.parametrize("bad", [-1, 4])
    def test_out_of_range(self, rng, bad):
        with pytest.raises(VocabularyError):
            dequantize(np.array([bad]), Palette(rng.random((4, 3))))


class TestPaletteType:
    def test_canonical_order(self):
        palette = Palette(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        np.testing.assert_array_equal(palette.centroids[0], [0.0, 0.0, 1.0])

    def test_rejects_duplicates_and_range(self):
        with pytest.raises(VocabularyError):
            Palette(np.array([[0.1, 0.1, 0.1], [0.1, 0.1, 0.1]]))
        with pytest.raises(VocabularyError):
            Palette(np.array([[1.5, 0.0, 0.0]]))

    def test_file_format(self, tmp_path, rng):
        palette = Palette(rng.random((5, 3)))
        data = palette.to_bytes()
        assert data[:6] == b"RCPAL1"
        assert int.from_bytes(data[6:10], "little") == 5
        assert len(data) == 10 + 5 * 12
        path = palette.save(tmp_path / "p.bin")
        assert Palette.load(path) == palette
        assert Palette.load(path).digest() == palette.digest()

    def test_bad_magic(self):
        with pytest.raises(VocabularyError):
            Palette.from_bytes(b"NOTPAL" + bytes(16))
