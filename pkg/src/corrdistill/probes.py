"""Evaluation probes over segmentation codes.

The cluster probe is a cosine minibatch k-means realized as Adam on a
differentiable cosine-distance loss; it sees no labels. The linear probe
is a supervised softmax classifier used purely as a feature-quality
barometer. Cluster assignments are aligned to ground-truth classes with
an O(K^3) Hungarian solver before any metric is computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .optim import AdamState, adam_step
from .tensorio import IGNORE_LABEL, NORM_EPS, FeatureMap, LabelMap, normalize_columns

PROBE_LR = 0.005


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    return normalize_columns(mat.T).T


@dataclass
class ClusterProbe:
    centroids: np.ndarray  # (K', K), unit rows
    adam: AdamState
    lr: float = PROBE_LR

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]


def init_cluster_probe(
    codes: np.ndarray, n_clusters: int, rng: np.random.Generator, lr: float = PROBE_LR
) -> ClusterProbe:
    """Greedy k-means++-style seeding from a code sample.

    Picks the first centroid uniformly, then samples subsequent ones with
    probability proportional to squared cosine distance from the chosen
    set. Centroids are unit-normalized.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[0] < n_clusters:
        raise DegenerateInputError(
            f"need at least {n_clusters} codes to seed {n_clusters} centroids"
        )
    unit = _normalize_rows(codes)
    chosen = [int(rng.integers(0, unit.shape[0]))]
    best_sim = unit @ unit[chosen[0]]
    while len(chosen) < n_clusters:
        d2 = np.square(1.0 - best_sim)
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, unit.shape[0]))  # degenerate: all identical
        else:
            idx = int(rng.choice(unit.shape[0], p=d2 / total))
        chosen.append(idx)
        best_sim = np.maximum(best_sim, unit @ unit[idx])
    centroids = unit[chosen].astype(np.float32)
    return ClusterProbe(
        centroids=centroids,
        adam=AdamState.zeros_like({"centroids": centroids}),
        lr=lr,
    )


def assign_clusters(codes: FeatureMap, probe: ClusterProbe) -> LabelMap:
    """Per-pixel argmax cosine similarity to the centroids; ties pick the
    lowest centroid index."""
    if codes.channels != probe.centroids.shape[1]:
        raise DimensionError(
            f"code dim {codes.channels} != centroid dim {probe.centroids.shape[1]}"
        )
    unit = normalize_columns(codes.data.reshape(codes.channels, -1))
    sims = probe.centroids @ unit  # (K', HW); centroids kept unit-norm
    labels = sims.argmax(axis=0).astype(np.uint8)
    return LabelMap(labels.reshape(codes.height, codes.width))


def cluster_probe_loss_grad(codes: np.ndarray, centroids: np.ndarray):
    """Mean cosine distance to each code's nearest centroid and its exact
    gradient w.r.t. the raw centroid array (through the unit normalization)."""
    codes = np.asarray(codes)
    if codes.size == 0:
        raise DegenerateInputError("empty code batch")
    unit = _normalize_rows(codes.astype(np.float64))
    cent_raw = np.asarray(centroids, dtype=np.float64)
    norms = np.linalg.norm(cent_raw, axis=1, keepdims=True)
    cent = cent_raw / np.maximum(norms, NORM_EPS)
    sims = unit @ cent.T  # (n, K')
    nearest = sims.argmax(axis=1)
    n = unit.shape[0]
    loss = float(np.mean(1.0 - sims[np.arange(n), nearest]))
    grad_chat = np.zeros_like(cent)
    np.add.at(grad_chat, nearest, -unit / n)
    # through v/max(|v|, eps): (I - c c^T)/|v| above the floor
    inner = (grad_chat * cent).sum(axis=1, keepdims=True)
    grad = np.where(
        norms > NORM_EPS, (grad_chat - inner * cent) / np.maximum(norms, NORM_EPS),
        grad_chat / NORM_EPS,
    )
    return loss, grad


def cluster_probe_step(codes: np.ndarray, probe: ClusterProbe) -> float:
    """One Adam step on mean cosine distance to each code's nearest centroid.

    Centroids are renormalized to unit length after the update.
    """
    loss, grad = cluster_probe_loss_grad(codes, probe.centroids)
    grad32 = grad.astype(np.float32)
    adam_step({"centroids": probe.centroids}, {"centroids": grad32}, probe.adam, probe.lr)
    probe.centroids[:] = _normalize_rows(probe.centroids)
    return loss


@dataclass
class LinearProbe:
    w: np.ndarray  # (K, K')
    b: np.ndarray  # (K',)
    adam: AdamState
    lr: float = PROBE_LR

    @property
    def n_classes(self) -> int:
        return self.w.shape[1]


def init_linear_probe(code_dim: int, n_classes: int, lr: float = PROBE_LR) -> LinearProbe:
    w = np.zeros((code_dim, n_classes), dtype=np.float32)
    b = np.zeros(n_classes, dtype=np.float32)
    return LinearProbe(w=w, b=b, adam=AdamState.zeros_like({"w": w, "b": b}), lr=lr)


def linear_probe_logits(codes: np.ndarray, probe: LinearProbe) -> np.ndarray:
    return codes @ probe.w + probe.b


def linear_probe_loss_grad(codes: np.ndarray, labels: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Softmax cross-entropy over labeled pixels with exact w/b gradients."""
    labels = np.asarray(labels).reshape(-1)
    keep = labels != IGNORE_LABEL
    if not keep.any():
        raise DegenerateInputError("no labeled pixels in batch")
    x = np.asarray(codes)[keep]
    y = labels[keep].astype(np.int64)
    n_classes = w.shape[1]
    if y.max() >= n_classes:
        raise DimensionError(f"label {y.max()} out of range for {n_classes} classes")

    logits = x @ w + b
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = x.shape[0]
    loss = float(-logp[np.arange(n), y].mean())

    grad_logits = np.exp(logp)
    grad_logits[np.arange(n), y] -= 1.0
    grad_logits /= n
    return loss, x.T @ grad_logits, grad_logits.sum(axis=0)


def linear_probe_step(codes: np.ndarray, labels: np.ndarray, probe: LinearProbe) -> float:
    """Softmax cross-entropy step on (n, K) codes; IGNORE pixels are dropped."""
    loss, grad_w, grad_b = linear_probe_loss_grad(codes, labels, probe.w, probe.b)
    grads = {"w": grad_w.astype(np.float32), "b": grad_b.astype(np.float32)}
    adam_step({"w": probe.w, "b": probe.b}, grads, probe.adam, probe.lr)
    return loss


def linear_probe_predict(codes: FeatureMap, probe: LinearProbe) -> LabelMap:
    x = codes.data.reshape(codes.channels, -1).T
    pred = linear_probe_logits(x, probe).argmax(axis=1).astype(np.uint8)
    return LabelMap(pred.reshape(codes.height, codes.width))


# --- Hungarian matching and metrics -------------------------------------------


@dataclass
class ConfusionMatrix:
    """Counts with rows = ground-truth class, columns = prediction."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise DimensionError("confusion matrix must be 2-d")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Matching:
    """Bijection from predicted cluster index to class index."""

    cluster_to_class: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.cluster_to_class, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise DimensionError("matching must be a permutation")
        self.cluster_to_class = perm


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Min-cost perfect assignment on a square matrix; returns col for each row.

    Classic O(n^3) potentials-and-augmenting-paths formulation.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise DimensionError("assignment needs a square cost matrix")
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col 1..n] = row, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[match[j] - 1] = j - 1
    return row_to_col


def hungarian_match(confusion: ConfusionMatrix) -> Matching:
    """Permutation of cluster ids maximizing total matched count."""
    counts = confusion.counts
    if counts.shape[0] != counts.shape[1]:
        raise DimensionError("hungarian matching needs a square confusion matrix")
    class_to_cluster = solve_assignment(-counts.astype(np.float64))
    cluster_to_class = np.zeros_like(class_to_cluster)
    cluster_to_class[class_to_cluster] = np.arange(class_to_cluster.size)
    return Matching(cluster_to_class)


def accumulate_confusion(
    preds: list[LabelMap], gts: list[LabelMap], n_rows: int, n_cols: int
) -> ConfusionMatrix:
    """Pool (gt, pred) counts over map pairs, skipping IGNORE ground truth."""
    counts = np.zeros((n_rows, n_cols), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        if pred.data.shape != gt.data.shape:
            raise DimensionError(
                f"prediction {pred.data.shape} and ground truth {gt.data.shape} differ"
            )
        keep = gt.data != IGNORE_LABEL
        g = gt.data[keep].astype(np.int64)
        p = pred.data[keep].astype(np.int64)
        np.add.at(counts, (g, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class SegMetrics:
    accuracy: float
    miou: float
    per_class_iou: dict[int, float]
    confusion: ConfusionMatrix


def segmentation_metrics(
    preds: list[LabelMap], gts: list[LabelMap], matching: Matching | None = None
) -> SegMetrics:
    """Pixel accuracy and mean IoU after the optional cluster-class matching.

    mIoU averages over classes present in the ground truth; IGNORE pixels
    never count. ``matching=None`` evaluates predictions as class ids.
    """
    if not preds or len(preds) != len(gts):
        raise DegenerateInputError("need equal, nonempty prediction and ground-truth lists")
    if matching is not None:
        k = matching.cluster_to_class.size
        preds = [LabelMap(matching.cluster_to_class[p.data.astype(np.int64)].astype(np.uint8)) for p in preds]
    else:
        k = int(max(int(p.data.max(initial=0)) for p in preds)) + 1
    n = max(k, max(int(g.data[g.data != IGNORE_LABEL].max(initial=0)) for g in gts) + 1)
    cm = accumulate_confusion(preds, gts, n, n)
    if cm.total == 0:
        raise DegenerateInputError("no evaluated pixels (all IGNORE)")
    counts = cm.counts
    accuracy = float(np.trace(counts) / cm.total)
    per_class: dict[int, float] = {}
    for c in range(n):
        tp = counts[c, c]
        denom = counts[c, :].sum() + counts[:, c].sum() - tp
        if counts[c, :].sum() > 0:  # class present in ground truth
            per_class[c] = float(tp / denom) if denom > 0 else 0.0
    miou = float(np.mean(list(per_class.values())))
    return SegMetrics(accuracy=accuracy, miou=miou, per_class_iou=per_class, confusion=cm)
