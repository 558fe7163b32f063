import numpy as np
import pytest

from src.config.settings import QuantizerConfig
from src.exceptions.base import ContractViolation, DegenerateInputError
from src.repositories.artifact_repository import read_blocks, write_blocks
from src.repositories.catalog_repository import EmbeddingMatrix
from src.services.quantizer_service import (Codebook, assign_nearest, assign_points, collision_free_ratio,
                                            fit_projection, kmeans_fit, rq_encode, rq_fit)


def _blobs(seed=0, n=120, dim=6):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((4, dim)) * 5
    return centers[rng.integers(4, size=n)] + rng.standard_normal((n, dim)) * 0.5


def _cfg(**kwargs):
    values = dict(levels=3, codes_per_level=[4, 4, 4], max_iters=50, rel_tol=1e-9, seed=3)
    values.update(kwargs)
    return QuantizerConfig(**values)


def test_assign_nearest_prefers_lowest_index_on_ties():
    centroids = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
    assert assign_nearest(np.zeros(2), centroids) == 0
    assert assign_nearest(np.array([0.0, 4.0]), centroids) == 2
    with pytest.raises(ContractViolation):
        assign_nearest(np.zeros(3), centroids)


def test_wcss_never_increases():
    history = []
    kmeans_fit(_blobs(), 6, _cfg(), stream=1, history=history)
    assert len(history) >= 2
    for before, after in zip(history, history[1:]):
        assert after <= before + 1e-9 * max(before, 1.0)


def test_kmeans_is_deterministic_and_float32_exact():
    points = _blobs(1)
    c1, l1, w1 = kmeans_fit(points, 5, _cfg(), stream=2)
    c2, l2, w2 = kmeans_fit(points, 5, _cfg(), stream=2)
    np.testing.assert_array_equal(c1, c2)
    np.testing.assert_array_equal(l1, l2)
    assert w1 == w2
    np.testing.assert_array_equal(c1, c1.astype(np.float32).astype(np.float64))


def test_kmeans_rejects_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        kmeans_fit(np.ones((10, 3)), 2, _cfg())
    with pytest.raises(DegenerateInputError):
        kmeans_fit(np.array([[0.0, np.nan]]), 1, _cfg())
    with pytest.raises(DegenerateInputError):
        rq_fit(_blobs(n=3), _cfg())


def test_chunked_workers_match_serial():
    points = _blobs(2, n=101)
    centroids = points[:7]
    serial = assign_points(points, centroids, workers=1, chunk_size=4096)
    parallel = assign_points(points, centroids, workers=4, chunk_size=9)
    np.testing.assert_array_equal(serial[0], parallel[0])
    np.testing.assert_allclose(serial[1], parallel[1])


def test_residual_energy_shrinks_per_level():
    codebook = rq_fit(_blobs(3), _cfg())
    assert codebook.codes_per_level == [4, 4, 4]
    for entry in codebook.report:
        assert entry["residual_energy_after"] <= entry["residual_energy_before"] * (1 + 1e-6)


def test_encode_matches_sequential_nearest_oracle():
    points = _blobs(4, n=60)
    codebook = rq_fit(points, _cfg(codes_per_level=[5, 3, 4]))
    result = rq_encode(points, codebook, workers=3, chunk_size=8)
    for row, point in enumerate(points):
        residual = point.copy()
        expected = []
        for centroids in codebook.levels:
            code = assign_nearest(residual, centroids)
            expected.append(code)
            residual = residual - centroids[code]
        assert result.code_of(row) == tuple(expected)
        np.testing.assert_allclose(result.final_residuals[row], residual)


def test_reloaded_codebook_reproduces_codes(tmp_path):
    points = _blobs(5, n=80)
    matrix = EmbeddingMatrix(rows=points, item_order=[f"i{n}" for n in range(len(points))])
    codebook = rq_fit(matrix, _cfg())
    path = tmp_path / "codebook.bin"
    write_blocks(path, codebook.levels, codebook.seed)
    blocks, seed = read_blocks(path)
    assert seed == 3
    reloaded = Codebook(levels=blocks, seed=seed)
    np.testing.assert_array_equal(rq_encode(matrix, codebook).codes, rq_encode(matrix, reloaded).codes)
    assert rq_encode(matrix, reloaded).item_order == matrix.item_order


def test_encode_checks_dimension():
    codebook = Codebook(levels=[np.zeros((2, 3))])
    with pytest.raises(ContractViolation):
        rq_encode(np.zeros((4, 2)), codebook)


def test_collision_free_ratio():
    codes = np.array([[0, 1], [0, 1], [1, 1], [2, 0]])
    assert collision_free_ratio(codes) == 0.5
    assert collision_free_ratio(np.empty((0, 2), dtype=np.int64)) == 1.0


def test_projection_normalize_and_pca():
    points = _blobs(6, n=50, dim=8)
    projection = fit_projection(points, _cfg(normalize=True, pca=True, pca_dim=3))
    out = projection.transform(points)
    assert out.shape == (50, 3)
    assert fit_projection(points, _cfg()).is_identity
