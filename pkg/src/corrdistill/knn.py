"""Five-crop preprocessing, global average pooling, and the cosine
K-nearest-neighbor lookup table used to pair training images.

The index is exact: desk-scale corpora keep the O(N^2) similarity scan
cheap and let an exhaustive oracle check it entry for entry. Crops of the
same parent image are valid neighbors; only the entry itself is excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensorio import NORM_EPS, FeatureMap, LabelMap

CROP_ORDER = ("top_left", "top_right", "bottom_left", "bottom_right", "center")


def five_crop_boxes(height: int, width: int) -> list[tuple[int, int, int, int]]:
    """(y0, x0, h, w) for the four corner crops and the center crop."""
    if height < 2 or width < 2:
        raise DimensionError(f"five-crop needs H,W >= 2, got {height}x{width}")
    hc, wc = height // 2, width // 2
    return [
        (0, 0, hc, wc),
        (0, width - wc, hc, wc),
        (height - hc, 0, hc, wc),
        (height - hc, width - wc, hc, wc),
        ((height - hc) // 2, (width - wc) // 2, hc, wc),
    ]


def five_crop(fmap: FeatureMap) -> list[FeatureMap]:
    """Four corner crops plus a center crop, each (H//2, W//2)."""
    return [
        FeatureMap(fmap.data[:, y0 : y0 + h, x0 : x0 + w].copy())
        for y0, x0, h, w in five_crop_boxes(fmap.height, fmap.width)
    ]


def five_crop_labels(lmap: LabelMap) -> list[LabelMap]:
    return [
        LabelMap(lmap.data[y0 : y0 + h, x0 : x0 + w].copy())
        for y0, x0, h, w in five_crop_boxes(lmap.height, lmap.width)
    ]


def global_pool(fmap: FeatureMap) -> np.ndarray:
    """Spatial mean per channel, L2-normalized with the zero-vector guard."""
    v = fmap.data.mean(axis=(1, 2), dtype=np.float64)
    return (v / max(float(np.linalg.norm(v)), NORM_EPS)).astype(np.float32)


@dataclass
class KnnIndex:
    pooled: np.ndarray  # (N, C) unit vectors
    neighbors: np.ndarray  # (N, k) indices, sorted by descending similarity
    similarities: np.ndarray  # (N, k)
    ids: list[str] | None = None
    parent_ids: list[str] | None = None

    @property
    def n_entries(self) -> int:
        return self.pooled.shape[0]

    @property
    def k_nn(self) -> int:
        return self.neighbors.shape[1]


def build_knn_index(
    pooled: np.ndarray,
    k_nn: int = 7,
    ids: list[str] | None = None,
    parent_ids: list[str] | None = None,
) -> KnnIndex:
    """Exact top-k cosine neighbors for each pooled vector.

    The entry itself is excluded; ties break toward the lowest index.
    ``parent_ids`` carry crop provenance for same-parent statistics.
    """
    pooled = np.asarray(pooled, dtype=np.float64)
    n = pooled.shape[0]
    if n < k_nn + 1:
        raise ConfigurationError(f"need at least k_nn+1={k_nn + 1} entries, got {n}")
    sims = pooled @ pooled.T
    np.fill_diagonal(sims, -np.inf)  # self never a neighbor
    # stable sort on descending similarity breaks ties by ascending index
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k_nn]
    nbr_sims = np.take_along_axis(sims, order, axis=1)
    return KnnIndex(
        pooled=pooled.astype(np.float32),
        neighbors=order.astype(np.int64),
        similarities=nbr_sims.astype(np.float32),
        ids=ids,
        parent_ids=parent_ids,
    )


@dataclass
class BatchPairing:
    x: np.ndarray  # (B,) entry indices, drawn without replacement
    x_knn: np.ndarray  # (B,) a uniformly chosen neighbor of each x
    x_rand: np.ndarray  # (B,) derangement of x: never the same entry


def sample_batch(index: KnnIndex, batch_size: int, rng: np.random.Generator) -> BatchPairing:
    """Draw a training batch: entries, one of their neighbors, and a shuffle.

    The random partner is a rejection-sampled derangement of the batch, so
    no entry is ever paired with itself in the rand slot.
    """
    if batch_size < 2:
        raise ConfigurationError("batch_size must be >= 2 for a derangement to exist")
    if batch_size > index.n_entries:
        raise ConfigurationError(
            f"batch_size {batch_size} exceeds corpus size {index.n_entries}"
        )
    x = rng.choice(index.n_entries, size=batch_size, replace=False)
    picks = rng.integers(0, index.k_nn, size=batch_size)
    x_knn = index.neighbors[x, picks]
    while True:
        perm = rng.permutation(batch_size)
        if not np.any(perm == np.arange(batch_size)):
            break
    return BatchPairing(x=x, x_knn=x_knn, x_rand=x[perm])


def self_match_stats(index: KnnIndex) -> np.ndarray:
    """Histogram over entries of same-parent crops among their neighbors.

    Returns counts for 0..k_nn same-parent neighbors; bins sum to N.
    """
    if index.parent_ids is None:
        raise ConfigurationError("index has no crop provenance; rebuild with parent_ids")
    parents = np.asarray(index.parent_ids, dtype=object)
    same = parents[index.neighbors] == parents[:, None]
    per_entry = same.sum(axis=1)
    return np.bincount(per_entry, minlength=index.k_nn + 1)


def write_self_match_csv(counts: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        fh.write("same_parent_neighbors,count\n")
        for k, c in enumerate(counts):
            fh.write(f"{k},{int(c)}\n")
