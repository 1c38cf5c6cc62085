"""Potts-model graph energy over dataset pixels and the loss/energy
maximum-likelihood equivalence oracle.

The sampled correspondence loss is, up to an additive constant, the
energy of a fully connected Potts model whose vertices are all pixels of
the dataset, whose edge weights are feature similarities shifted by the
negative-pressure constant, and whose compatibility is cosine distance
between codes. ``equivalence_check`` verifies that identity numerically
on enumerable datasets; sampling from the induced Boltzmann distribution
is deliberately out of scope (only the MLE matters here).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DimensionError, ResourceLimitError
from .head import HeadParams, head_forward
from .losses import simple_corr_loss
from .tensorio import FeatureMap, normalize_columns

Compatibility = Literal["cosine_distance", "potts_indicator"]

MAX_EQUIV_IMAGES = 4
MAX_EQUIV_SIDE = 8


@dataclass
class PixelGraph:
    """Fully connected weighted graph over pixels with a code per vertex."""

    vertices: list[tuple[str, int, int]]  # (image id, h, w)
    weights: np.ndarray  # (N, N)
    codes: np.ndarray  # (N, d) continuous codes, or (N,) integer labels

    def __post_init__(self):
        n = len(self.vertices)
        if self.weights.shape != (n, n):
            raise DimensionError(f"weight table must be ({n},{n}), got {self.weights.shape}")
        if self.codes.shape[0] != n:
            raise DimensionError("need one code per vertex")


def potts_energy(graph: PixelGraph, compatibility: Compatibility) -> float:
    """Sum of w(v_i, v_j) * mu(code_i, code_j) over all ordered vertex pairs.

    Self-pairs are included; they contribute zero under both
    compatibilities for deterministic per-vertex codes.
    """
    w = np.asarray(graph.weights, dtype=np.float64)
    if compatibility == "cosine_distance":
        unit = normalize_columns(np.asarray(graph.codes, dtype=np.float64).T).T
        mu = 1.0 - unit @ unit.T
    elif compatibility == "potts_indicator":
        labels = np.asarray(graph.codes).reshape(-1)
        mu = (labels[:, None] != labels[None, :]).astype(np.float64)
    else:
        raise ValueError(f"unknown compatibility {compatibility!r}")
    return float((w * mu).sum())


@dataclass
class EquivalenceReport:
    energy: float
    loss_sum: float
    weight_sum: float
    max_abs_diff: float


def build_pixel_graph(feats: list[FeatureMap], codes: list[FeatureMap], b: float) -> PixelGraph:
    """Graph over all dataset pixels with w = cross-image feature cosine - b."""
    vertices = [
        (f"img{n}", h, w)
        for n, f in enumerate(feats)
        for h in range(f.height)
        for w in range(f.width)
    ]
    feat_cols = np.concatenate([f.data.reshape(f.channels, -1) for f in feats], axis=1)
    unit = normalize_columns(feat_cols.astype(np.float64))
    weights = unit.T @ unit - b
    code_rows = np.concatenate([c.data.reshape(c.channels, -1) for c in codes], axis=1).T
    return PixelGraph(vertices=vertices, weights=weights, codes=code_rows)


def equivalence_check(
    dataset: list[FeatureMap], head: HeadParams, b: float
) -> EquivalenceReport:
    """Check that summed dense pairwise losses equal the graph energy.

    The energy uses mu = 1 - cos while the loss uses -cos, so they differ
    by the constant sum of all edge weights; the report's max_abs_diff is
    taken after removing that constant.

    The loss side sums the sampled loss over ordered image pairs with the
    sample locations placed on every grid point; the energy side goes
    through one global pixel graph. Both run in float64 so the identity
    holds to well below the acceptance tolerance.
    """
    if len(dataset) > MAX_EQUIV_IMAGES:
        raise ResourceLimitError(f"equivalence check enumerates <= {MAX_EQUIV_IMAGES} images")
    for f in dataset:
        if max(f.height, f.width) > MAX_EQUIV_SIDE:
            raise ResourceLimitError(f"equivalence check caps feature maps at {MAX_EQUIV_SIDE}x{MAX_EQUIV_SIDE}")

    codes = [head_forward(f, head)[0] for f in dataset]
    feat_cols = [f.data.reshape(f.channels, -1).astype(np.float64) for f in dataset]
    code_cols = [s.data.reshape(s.channels, -1).astype(np.float64) for s in codes]

    loss_sum = 0.0
    for fx, sx in zip(feat_cols, code_cols):
        for fy, sy in zip(feat_cols, code_cols):
            loss_sum += simple_corr_loss(fx, fy, sx, sy, b).value

    graph = build_pixel_graph(dataset, codes, b)
    energy = potts_energy(graph, "cosine_distance")
    weight_sum = float(graph.weights.sum())
    return EquivalenceReport(
        energy=energy,
        loss_sum=loss_sum,
        weight_sum=weight_sum,
        max_abs_diff=abs(energy - weight_sum - loss_sum),
    )
