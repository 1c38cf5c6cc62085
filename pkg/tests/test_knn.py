import numpy as np
import pytest

from corrdistill.errors import ConfigurationError, DimensionError
from corrdistill.knn import (
    build_knn_index,
    five_crop,
    five_crop_boxes,
    global_pool,
    sample_batch,
    self_match_stats,
)
from corrdistill.tensorio import FeatureMap


def knn_oracle(pooled, k):
    """Exhaustive pure-Python scan with the same descending-sim, lowest-index
    tie rule."""
    n = len(pooled)
    out = []
    for i in range(n):
        sims = [
            (float(np.dot(np.float64(pooled[i]), np.float64(pooled[j]))), j)
            for j in range(n)
            if j != i
        ]
        sims.sort(key=lambda p: (-p[0], p[1]))
        out.append([j for _, j in sims[:k]])
    return out


def test_five_crop_boxes_4x4():
    boxes = five_crop_boxes(4, 4)
    assert boxes[0] == (0, 0, 2, 2)  # top-left rows 0-1, cols 0-1
    assert boxes[4] == (1, 1, 2, 2)  # center rows 1-2, cols 1-2


def test_five_crop_values():
    data = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    crops = five_crop(FeatureMap(data))
    assert np.array_equal(crops[0].data[0], data[0, 0:2, 0:2])
    assert np.array_equal(crops[3].data[0], data[0, 2:4, 2:4])
    assert np.array_equal(crops[4].data[0], data[0, 1:3, 1:3])


def test_five_crop_constant_map():
    crops = five_crop(FeatureMap(np.full((2, 6, 6), 3.0, np.float32)))
    assert len(crops) == 5
    for c in crops:
        assert c.height == 3 and c.width == 3
        assert np.all(c.data == 3.0)


def test_five_crop_corner_coverage():
    # corner crops of an even-dimension map tile it exactly
    h = w = 6
    covered = np.zeros((h, w), int)
    for y0, x0, ch, cw in five_crop_boxes(h, w)[:4]:
        covered[y0 : y0 + ch, x0 : x0 + cw] += 1
    assert (covered >= 1).all()


def test_five_crop_degenerate():
    with pytest.raises(DimensionError):
        five_crop(FeatureMap(np.zeros((1, 1, 4), np.float32)))


def test_global_pool_constant_unit():
    v = np.array([0.6, 0.8], np.float32)
    fmap = FeatureMap(np.tile(v[:, None, None], (1, 3, 3)))
    assert np.allclose(global_pool(fmap), v, atol=1e-6)


def test_global_pool_two_locations():
    fmap = FeatureMap(np.array([[[1.0, 0.0]], [[0.0, 1.0]]], np.float32))
    assert np.allclose(global_pool(fmap), np.array([1, 1]) / np.sqrt(2), atol=1e-6)


def test_global_pool_zero_map():
    assert np.all(global_pool(FeatureMap(np.zeros((3, 2, 2), np.float32))) == 0)


def test_knn_orthonormal_tie_break():
    pooled = np.eye(4, dtype=np.float64)  # all cross sims exactly 0
    index = build_knn_index(pooled, k_nn=1)
    # ties broken by lowest index; entry 0's tie group is {1,2,3}
    assert index.neighbors[0, 0] == 1
    assert index.neighbors[1, 0] == 0
    assert index.neighbors[3, 0] == 0


def test_knn_duplicates_first():
    rng = np.random.default_rng(0)
    pooled = rng.normal(size=(8, 5))
    pooled /= np.linalg.norm(pooled, axis=1, keepdims=True)
    pooled[5] = pooled[0]
    index = build_knn_index(pooled, k_nn=3)
    assert index.neighbors[0, 0] == 5
    assert index.neighbors[5, 0] == 0
    assert index.similarities[0, 0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_knn_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 120))
    pooled = rng.normal(size=(n, 6))
    pooled /= np.linalg.norm(pooled, axis=1, keepdims=True)
    index = build_knn_index(pooled, k_nn=7)
    assert index.neighbors.tolist() == knn_oracle(pooled, 7)


def test_knn_needs_enough_entries():
    with pytest.raises(ConfigurationError):
        build_knn_index(np.eye(4), k_nn=7)


def test_sample_batch_two_is_swap():
    pooled = np.eye(3)
    index = build_knn_index(pooled, k_nn=2)
    rng = np.random.default_rng(1)
    for _ in range(20):
        pairing = sample_batch(index, 2, rng)
        assert pairing.x_rand[0] == pairing.x[1]
        assert pairing.x_rand[1] == pairing.x[0]


def test_sample_batch_deterministic():
    rng1 = np.random.default_rng(3)
    rng2 = np.random.default_rng(3)
    pooled = np.random.default_rng(0).normal(size=(30, 4))
    index = build_knn_index(pooled, k_nn=7)
    a = sample_batch(index, 8, rng1)
    b = sample_batch(index, 8, rng2)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.x_knn, b.x_knn)
    assert np.array_equal(a.x_rand, b.x_rand)


def test_sample_batch_never_self_in_rand():
    pooled = np.random.default_rng(4).normal(size=(40, 4))
    index = build_knn_index(pooled, k_nn=7)
    rng = np.random.default_rng(5)
    for _ in range(200):
        pairing = sample_batch(index, 8, rng)
        assert not np.any(pairing.x_rand == pairing.x)


def test_sample_batch_rejects_tiny_batch():
    index = build_knn_index(np.eye(3), k_nn=2)
    with pytest.raises(ConfigurationError):
        sample_batch(index, 1, np.random.default_rng(0))


def test_knn_pick_frequencies_uniform():
    # each of the 7 neighbors should be drawn with frequency 1/7 +- 3 sigma
    pooled = np.random.default_rng(6).normal(size=(30, 8))
    index = build_knn_index(pooled, k_nn=7)
    rng = np.random.default_rng(7)
    draws = 10_000
    batch = 10
    counts = np.zeros(7)
    for _ in range(draws // batch):
        pairing = sample_batch(index, batch, rng)
        for xi, ki in zip(pairing.x, pairing.x_knn):
            slot = list(index.neighbors[xi]).index(ki)
            counts[slot] += 1
    p = 1 / 7
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma)


def _block_corpus():
    # 3 parents x 5 crops; each parent has its own orthogonal direction
    pooled = []
    parents = []
    for parent in range(3):
        v = np.zeros(8)
        v[parent] = 1.0
        for crop in range(5):
            pooled.append(v)
            parents.append(f"img{parent}")
    return np.asarray(pooled), parents


def test_self_match_stats_block_structure():
    pooled, parents = _block_corpus()
    index = build_knn_index(pooled, k_nn=7, parent_ids=parents)
    counts = self_match_stats(index)
    # every entry has exactly its 4 sibling crops as same-parent neighbors
    assert counts[4] == len(parents)
    assert counts.sum() == len(parents)


def test_self_match_stats_requires_provenance():
    index = build_knn_index(np.random.default_rng(8).normal(size=(10, 4)), k_nn=3)
    with pytest.raises(ConfigurationError):
        self_match_stats(index)
