"""Feature-quality diagnostics: correspondence average precision and
code-similarity histograms.

Treating each correspondence-volume entry as a logit for the matching
label-co-occurrence bit turns feature quality into a retrieval problem;
the average precision of that ranking is a fast, label-aware diagnostic
that needs no training. The similarity histogram is the balance check
used while tuning the attraction/repulsion constants: a healthy run is
bimodal with peaks near similarity 1 (clustered pairs) and 0
(orthogonalized pairs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corrvol import CoOccurrenceVolume, CorrVolume
from .errors import DegenerateInputError, DimensionError
from .tensorio import FeatureMap, normalize_columns

N_HIST_BINS = 64


@dataclass
class PRCurve:
    thresholds: np.ndarray  # strictly descending unique scores
    precision: np.ndarray
    recall: np.ndarray
    average_precision: float


@dataclass
class SimilarityHistogram:
    bin_edges: np.ndarray  # N_HIST_BINS + 1 uniform edges over [-1, 1]
    counts: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.counts.sum())


def pr_curve_from_scores(scores: np.ndarray, targets: np.ndarray) -> PRCurve:
    """Precision-recall curve with equal scores collapsed into one threshold.

    AP uses step interpolation: the sum of precision times recall
    increment over descending thresholds.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=bool).reshape(-1)
    if scores.shape != targets.shape:
        raise DimensionError("scores and targets must have equal length")
    n_pos = int(targets.sum())
    if n_pos == 0 or n_pos == targets.size:
        raise DegenerateInputError("targets must contain at least one positive and one negative")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    t_sorted = targets[order]
    # last index of each tied-score group
    group_end = np.nonzero(np.diff(s_sorted) != 0)[0]
    group_end = np.append(group_end, s_sorted.size - 1)

    tp_cum = np.cumsum(t_sorted)[group_end]
    n_cum = group_end + 1.0
    precision = tp_cum / n_cum
    recall = tp_cum / n_pos
    thresholds = s_sorted[group_end]

    recall_prev = np.concatenate(([0.0], recall[:-1]))
    ap = float(np.sum((recall - recall_prev) * precision))
    return PRCurve(thresholds, precision, recall, ap)


def correspondence_ap(pairs: list[tuple[CorrVolume, CoOccurrenceVolume]]) -> PRCurve:
    """Average precision of correspondence scores against label co-occurrence.

    Each non-ignored volume entry contributes one (score, target) pair;
    entries masked by IGNORE pixels are dropped.
    """
    if not pairs:
        raise DegenerateInputError("need at least one (volume, co-occurrence) pair")
    scores = []
    targets = []
    for vol, cooc in pairs:
        if vol.data.shape != cooc.data.shape:
            raise DimensionError(
                f"volume dims {vol.data.shape} differ from co-occurrence dims {cooc.data.shape}"
            )
        m = cooc.mask.reshape(-1)
        scores.append(vol.data.reshape(-1)[m])
        targets.append(cooc.data.reshape(-1)[m])
    return pr_curve_from_scores(np.concatenate(scores), np.concatenate(targets))


def similarity_histogram(s: FeatureMap, n_pairs: int, rng_seed: int) -> SimilarityHistogram:
    """Histogram of cosine similarities between randomly sampled location pairs.

    Samples ``n_pairs`` ordered location pairs uniformly with replacement
    from ``s x s`` and bins their cosine similarities into 64 uniform bins
    on [-1, 1]. Deterministic given the seed.
    """
    if n_pairs < 1:
        raise DegenerateInputError("n_pairs must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n_locs = s.height * s.width
    cols = normalize_columns(s.data.reshape(s.channels, -1))
    ia = rng.integers(0, n_locs, size=n_pairs)
    ib = rng.integers(0, n_locs, size=n_pairs)
    sims = np.einsum("cn,cn->n", cols[:, ia], cols[:, ib])
    return histogram_from_similarities(sims)


def histogram_from_similarities(sims: np.ndarray) -> SimilarityHistogram:
    edges = np.linspace(-1.0, 1.0, N_HIST_BINS + 1)
    # cosine values can exceed +-1 by float error; clip so every sample lands in a bin
    counts, _ = np.histogram(np.clip(sims, -1.0, 1.0), bins=edges)
    return SimilarityHistogram(edges, counts)


def write_pr_csv(curve: PRCurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall\n")
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            fh.write(f"{float(t)!r},{float(p)!r},{float(r)!r}\n")


def write_hist_csv(hist: SimilarityHistogram, path) -> None:
    with open(path, "w") as fh:
        fh.write("bin_left,bin_right,count\n")
        for left, right, c in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
            fh.write(f"{float(left)!r},{float(right)!r},{int(c)}\n")
