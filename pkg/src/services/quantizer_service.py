"""
Quantizer Service.
Residual K-means codebook learning and greedy residual encoding.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus
from sklearn.decomposition import PCA
from sklearn.preprocessing import normalize

from src.config.settings import QuantizerConfig
from src.exceptions.base import ContractViolation, DegenerateInputError
from src.repositories.catalog_repository import EmbeddingMatrix

logger = logging.getLogger(__name__)

# Float noise allowed on monotonicity checks
_MONOTONE_SLACK = 1e-9


@dataclass
class Codebook:
    levels: List[np.ndarray]
    seed: int = 0
    report: List[dict] = field(default_factory=list, compare=False)

    @property
    def dim(self) -> int:
        return int(self.levels[0].shape[1])

    @property
    def codes_per_level(self) -> List[int]:
        return [int(level.shape[0]) for level in self.levels]

    def __len__(self) -> int:
        return len(self.levels)


@dataclass
class EncodeResult:
    codes: np.ndarray
    final_residuals: np.ndarray
    item_order: List[str] = field(default_factory=list)

    def code_of(self, index: int) -> Tuple[int, ...]:
        return tuple(int(c) for c in self.codes[index])


@dataclass
class Projection:
    """Optional preprocessing applied before quantization."""

    normalize: bool = False
    mean: Optional[np.ndarray] = None
    components: Optional[np.ndarray] = None

    def transform(self, rows: np.ndarray) -> np.ndarray:
        out = np.asarray(rows, dtype=np.float64)
        if self.normalize:
            out = normalize(out, norm="l2")
        if self.components is not None:
            out = (out - self.mean) @ self.components.T
        return out

    @property
    def is_identity(self) -> bool:
        return not self.normalize and self.components is None


def fit_projection(rows: np.ndarray, cfg: QuantizerConfig) -> Projection:
    """Fit the normalize / PCA preprocessing described by ``cfg``."""
    projection = Projection(normalize=cfg.normalize)
    if not cfg.pca:
        return projection

    data = projection.transform(rows)
    n_components = min(cfg.pca_dim, data.shape[1], data.shape[0])
    if n_components >= data.shape[1]:
        logger.warning(f"PCA to {cfg.pca_dim} skipped: embeddings already have dim {data.shape[1]}")
        return projection

    pca = PCA(n_components=n_components, svd_solver="full", random_state=cfg.seed).fit(data)
    projection.mean = pca.mean_.astype(np.float64)
    projection.components = pca.components_.astype(np.float64)
    logger.info(
        f"PCA {data.shape[1]} -> {n_components} keeps "
        f"{float(pca.explained_variance_ratio_.sum()):.3f} of the variance"
    )
    return projection


def assign_nearest(point: np.ndarray, centroids: np.ndarray) -> int:
    """
    Index of the centroid closest to ``point`` in Euclidean distance.
    Ties go to the lowest index.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    if centroids.ndim != 2 or centroids.shape[0] == 0:
        raise ContractViolation("assign_nearest needs a non-empty centroid set")
    if centroids.shape[1] != point.shape[0]:
        raise ContractViolation(f"point dim {point.shape[0]} != centroid dim {centroids.shape[1]}")
    distances = cdist(point[None, :], centroids, "sqeuclidean")[0]
    return int(np.argmin(distances))


def _assign_chunk(args) -> Tuple[np.ndarray, np.ndarray]:
    points, centroids = args
    distances = cdist(points, centroids, "sqeuclidean")
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(len(points)), labels]


def assign_points(points: np.ndarray, centroids: np.ndarray, workers: int = 1,
                  chunk_size: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest centroid for every row, computed in fixed-size chunks.

    Returns:
        (labels, squared distances); identical for any worker count
    """
    chunks = [(points[i:i + chunk_size], centroids) for i in range(0, len(points), chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="Quantizer") as executor:
            results = list(executor.map(_assign_chunk, chunks))
    else:
        results = [_assign_chunk(chunk) for chunk in chunks]
    labels = np.concatenate([r[0] for r in results]).astype(np.int64)
    distances = np.concatenate([r[1] for r in results])
    return labels, distances


def _wcss(distances: np.ndarray, chunk_size: int) -> float:
    # Reduce chunk by chunk in order
    total = 0.0
    for i in range(0, len(distances), chunk_size):
        total += float(distances[i:i + chunk_size].sum())
    return total


def _seed_state(seed: int, stream: int) -> np.random.RandomState:
    return np.random.RandomState(np.random.SeedSequence([seed, stream]).generate_state(4))


def _update_centroids(points: np.ndarray, labels: np.ndarray, distances: np.ndarray,
                      centroids: np.ndarray) -> Tuple[np.ndarray, int]:
    k = centroids.shape[0]
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, points)
    counts = np.bincount(labels, minlength=k)
    updated = centroids.copy()
    live = counts > 0
    updated[live] = sums[live] / counts[live, None]

    repaired = 0
    if not live.all():
        # Empty clusters take the point farthest from its own centroid
        remaining = distances.copy()
        for cluster in np.flatnonzero(~live):
            far = int(np.argmax(remaining))
            updated[cluster] = points[far]
            remaining[far] = -1.0
            repaired += 1
    return updated, repaired


def kmeans_fit(points: np.ndarray, k: int, cfg: QuantizerConfig, stream: int = 0,
               history: Optional[List[float]] = None) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Lloyd's algorithm with k-means++ seeding.

    Args:
        points: n x d matrix
        k: Number of centroids
        cfg: Quantizer settings (seed, max_iters, rel_tol, workers, chunk_size)
        stream: Seed stream id, so each level draws independent seeds
        history: When given, receives the WCSS after every assignment step

    Returns:
        (centroids, assignments, wcss) with centroids rounded to float32 precision
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise DegenerateInputError("kmeans_fit needs a non-empty point matrix")
    if not np.isfinite(points).all():
        raise DegenerateInputError("kmeans_fit points contain non-finite values")
    if k < 1:
        raise DegenerateInputError(f"k must be >= 1, got {k}")
    distinct = np.unique(points, axis=0).shape[0]
    if k > distinct:
        raise DegenerateInputError(f"k={k} exceeds the {distinct} distinct points",
                                   details={"k": k, "distinct": distinct})

    centroids, _ = kmeans_plusplus(points, n_clusters=k, random_state=_seed_state(cfg.seed, stream))
    centroids = centroids.astype(np.float64)
    labels, distances = assign_points(points, centroids, cfg.workers, cfg.chunk_size)
    wcss = _wcss(distances, cfg.chunk_size)
    trace = [wcss]

    for iteration in range(1, cfg.max_iters + 1):
        centroids, repaired = _update_centroids(points, labels, distances, centroids)
        labels, distances = assign_points(points, centroids, cfg.workers, cfg.chunk_size)
        new_wcss = _wcss(distances, cfg.chunk_size)
        trace.append(new_wcss)
        if repaired:
            logger.debug(f"Iteration {iteration}: repaired {repaired} empty clusters")
        if new_wcss > wcss + _MONOTONE_SLACK * max(wcss, 1.0):
            raise ContractViolation(f"WCSS increased at iteration {iteration}: {wcss} -> {new_wcss}")

        improvement = (wcss - new_wcss) / wcss if wcss > 0 else 0.0
        wcss = new_wcss
        if improvement < cfg.rel_tol:
            break

    # Stored codebooks are float32; assignments must match what a reload reproduces
    centroids = centroids.astype(np.float32).astype(np.float64)
    labels, distances = assign_points(points, centroids, cfg.workers, cfg.chunk_size)
    wcss = _wcss(distances, cfg.chunk_size)

    if history is not None:
        history.extend(trace)
    logger.debug(f"kmeans_fit k={k}: {len(trace) - 1} iterations, wcss={wcss:.6g}")
    return centroids, labels, wcss


def _rows_of(embeddings: Union[EmbeddingMatrix, np.ndarray]) -> Tuple[np.ndarray, List[str]]:
    if isinstance(embeddings, EmbeddingMatrix):
        return np.asarray(embeddings.rows, dtype=np.float64), list(embeddings.item_order)
    rows = np.asarray(embeddings, dtype=np.float64)
    return rows, [str(i) for i in range(rows.shape[0])]


def rq_fit(embeddings: Union[EmbeddingMatrix, np.ndarray], cfg: QuantizerConfig) -> Codebook:
    """
    Fit an L-level residual codebook: level 1 on the embeddings, each later
    level on what the previous levels left over.
    """
    rows, _ = _rows_of(embeddings)
    n_items = rows.shape[0]
    if n_items < max(cfg.codes_per_level):
        raise DegenerateInputError(
            f"{n_items} items cannot fill a level of {max(cfg.codes_per_level)} codes",
            details={"n_items": n_items, "codes_per_level": cfg.codes_per_level})

    residual = rows.copy()
    energy = float((residual ** 2).sum())
    levels: List[np.ndarray] = []
    report: List[dict] = []

    for level, k in enumerate(cfg.codes_per_level, start=1):
        history: List[float] = []
        try:
            centroids, labels, wcss = kmeans_fit(residual, k, cfg, stream=level, history=history)
        except DegenerateInputError as e:
            raise DegenerateInputError(f"level {level}: {e.message}", details={**e.details, "level": level}) from e

        residual = residual - centroids[labels]
        new_energy = float((residual ** 2).sum())
        if new_energy > energy * (1.0 + 1e-6) + 1e-12:
            raise ContractViolation(f"residual energy grew at level {level}: {energy} -> {new_energy}")

        live = int(np.unique(labels).shape[0])
        report.append({
            "level": level,
            "codes": k,
            "live_codes": live,
            "iterations": len(history) - 1,
            "wcss_history": history,
            "residual_energy_before": energy,
            "residual_energy_after": new_energy,
        })
        logger.info(f"Level {level}: K={k}, live codes {live}, residual energy {energy:.6g} -> {new_energy:.6g}")
        levels.append(centroids)
        energy = new_energy

    return Codebook(levels=levels, seed=cfg.seed, report=report)


def rq_encode(embeddings: Union[EmbeddingMatrix, np.ndarray], codebook: Codebook,
              workers: int = 1, chunk_size: int = 4096) -> EncodeResult:
    """Greedy nearest-centroid encoding, one level at a time."""
    rows, order = _rows_of(embeddings)
    if rows.ndim != 2 or rows.shape[1] != codebook.dim:
        raise ContractViolation(f"embedding dim {rows.shape[-1]} != codebook dim {codebook.dim}")

    residual = rows.copy()
    codes = np.empty((rows.shape[0], len(codebook)), dtype=np.int64)
    for level, centroids in enumerate(codebook.levels):
        labels, _ = assign_points(residual, centroids, workers, chunk_size)
        codes[:, level] = labels
        residual = residual - centroids[labels]
    return EncodeResult(codes=codes, final_residuals=residual, item_order=order)


def collision_free_ratio(codes: np.ndarray) -> float:
    """Share of items whose raw code tuple is unique."""
    if len(codes) == 0:
        return 1.0
    _, inverse, counts = np.unique(codes, axis=0, return_inverse=True, return_counts=True)
    return float((counts[inverse.reshape(-1)] == 1).mean())
