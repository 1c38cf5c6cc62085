"""Dense correspondence volumes between feature maps and label co-occurrence.

A correspondence volume holds the cosine similarity between every spatial
location of one feature map and every location of another, indexed
``[h][w][i][j]``. Volumes are materialized densely; callers that need
bounded memory should use the sampled loss path instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensorio import IGNORE_LABEL, NORM_EPS, FeatureMap, LabelMap, normalize_columns


@dataclass
class CorrVolume:
    """Cosine similarities, shape (H, W, I, J) float32."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DimensionError(f"correspondence volume must be 4-d, got {self.data.shape}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)


@dataclass
class CoOccurrenceVolume:
    """Binary label agreement, shape (H, W, I, J), plus a validity mask.

    ``mask`` is False wherever either referenced pixel carries the IGNORE
    label; such pairs are excluded from diagnostics.
    """

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.data.shape != self.mask.shape or self.data.ndim != 4:
            raise DimensionError("co-occurrence data and mask must share a 4-d shape")
        self.data = np.ascontiguousarray(self.data, dtype=bool)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)


def feature_correspondence(f: FeatureMap, g: FeatureMap, eps: float = NORM_EPS) -> CorrVolume:
    """Cosine similarity between every location pair of ``f`` and ``g``.

    Output ``[h][w][i][j]`` is the cosine of the channel vectors at
    ``f[:, h, w]`` and ``g[:, i, j]``, with zero vectors handled by the
    same eps floor as channel normalization.
    """
    if f.channels != g.channels:
        raise DimensionError(f"channel mismatch: {f.channels} vs {g.channels}")
    fn = normalize_columns(f.data.reshape(f.channels, -1), eps)
    gn = normalize_columns(g.data.reshape(g.channels, -1), eps)
    sims = fn.T @ gn
    return CorrVolume(sims.reshape(f.height, f.width, g.height, g.width))


def spatial_center(vol: CorrVolume) -> CorrVolume:
    """Subtract, per source location, the mean over all target locations."""
    mean = vol.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    return CorrVolume((vol.data - mean).astype(np.float32))


def label_cooccurrence(k: LabelMap, l: LabelMap) -> CoOccurrenceVolume:
    """Binary volume marking location pairs whose class labels agree.

    ``data[h][w][i][j]`` is True iff ``k[h,w] == l[i,j]`` and neither pixel
    is IGNORE; the mask marks pairs where both pixels are non-IGNORE.
    """
    kv = k.data.reshape(-1)
    lv = l.data.reshape(-1)
    valid = (kv[:, None] != IGNORE_LABEL) & (lv[None, :] != IGNORE_LABEL)
    same = (kv[:, None] == lv[None, :]) & valid
    shape = (k.height, k.width, l.height, l.width)
    return CoOccurrenceVolume(same.reshape(shape), valid.reshape(shape))
