"""Training orchestration: KNN-paired batches, the three-term sampled
correspondence loss, Adam updates for the head, and probes trained
alongside on detached codes.

The loop is deterministic given the config seeds: RNG streams for
initialization, batch pairing, location sampling, probes, and histogram
logging are spawned from one seed sequence, and every consumer draws in a
fixed order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, five_crop_dataset
from .diagnostics import SimilarityHistogram, histogram_from_similarities
from .errors import ConfigurationError, DegenerateInputError
from .head import (
    HeadParams,
    _corner_indices,
    SampledLocations,
    head_backward_matrix,
    head_forward,
    head_forward_matrix,
    init_head_params,
    load_descriptor,
    load_head_params,
    save_descriptor,
    save_head_params,
)
from .knn import KnnIndex, build_knn_index, global_pool, sample_batch
from .losses import LossConfig, smoothness_coeff
from .optim import AdamState, adam_step
from .probes import (
    ClusterProbe,
    LinearProbe,
    Matching,
    SegMetrics,
    accumulate_confusion,
    assign_clusters,
    cluster_probe_step,
    hungarian_match,
    init_cluster_probe,
    init_linear_probe,
    linear_probe_predict,
    linear_probe_step,
    segmentation_metrics,
)
from .tensorio import (
    FeatureMap,
    normalize_columns,
    read_feature_archive,
    write_feature_archive,
)


@dataclass
class TrainConfig:
    channels: int
    n_classes: int
    steps: int
    loss: LossConfig = field(default_factory=LossConfig)
    code_dim: int = 70
    head_lr: float = 0.0005
    probe_lr: float = 0.005
    batch_size: int = 32
    seed: int = 0
    dropout_p: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    k_nn: int = 7
    five_crop: bool = True
    log_every: int = 100
    checkpoint_every: int = 500
    hist_pairs: int = 2048

    def validate(self) -> "TrainConfig":
        if min(self.channels, self.n_classes, self.code_dim, self.batch_size) < 1:
            raise ConfigurationError("dims and batch size must be positive")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")
        if min(self.head_lr, self.probe_lr) <= 0:
            raise ConfigurationError("learning rates must be positive")
        self.loss.validate()
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_json()
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig.from_json(d.get("loss", {}))
        return TrainConfig(**d).validate()


@dataclass
class TrainResult:
    head: HeadParams
    cluster_probe: ClusterProbe
    linear_probe: LinearProbe
    knn_index: KnnIndex
    log: list[dict]
    config: TrainConfig


@dataclass
class EvalReport:
    cluster: SegMetrics
    linear: SegMetrics | None
    matching: Matching


class _StackedMaps:
    """All training maps' dropout-scaled rows concatenated for one batched
    head pass, with per-map spans for sampling and gradient scatter."""

    def __init__(self, flat_feats, shapes, map_ids, channels, dropout_p, rng):
        self.map_ids = list(map_ids)
        self.slot = {m: i for i, m in enumerate(self.map_ids)}
        self.shapes = [shapes[m] for m in self.map_ids]
        starts = np.cumsum([0] + [h * w for h, w in self.shapes])
        self.starts = starts
        rows = np.concatenate([flat_feats[m].T for m in self.map_ids], axis=0)
        if dropout_p > 0.0:
            scales = np.empty_like(rows)
            for i, m in enumerate(self.map_ids):
                keep = rng.random(channels) >= dropout_p
                scale = keep.astype(np.float32) / np.float32(1.0 - dropout_p)
                scales[starts[i] : starts[i + 1]] = scale
            self.drop_scale = scales
        else:
            self.drop_scale = None
        self.rows = rows

    def span(self, map_id):
        i = self.slot[map_id]
        return self.starts[i], self.starts[i + 1], self.shapes[i]


class _PairSampler:
    """Bilinear sampling of many (map, locations) pairs against stacked rows.

    The four-corner interpolation is one sparse matrix A of shape
    (B*n, P); sampling is A @ rows and the gradient scatter is A^T @ g,
    both in compiled sparse kernels.
    """

    def __init__(self, stacked: _StackedMaps, map_ids, locs: np.ndarray):
        # locs: (B, n, 2) in [0,1]^2
        b, n, _ = locs.shape
        self.b, self.n = b, n
        shapes = {stacked.span(m)[2] for m in map_ids}
        if len(shapes) == 1:
            # uniform map shape: corner math vectorizes across all pairs
            h, w = shapes.pop()
            starts = np.array([stacked.span(m)[0] for m in map_ids], dtype=np.intp)
            y = locs[..., 0] * (h - 1) if h > 1 else np.zeros((b, n))
            x = locs[..., 1] * (w - 1) if w > 1 else np.zeros((b, n))
            y0 = np.floor(y).astype(np.intp)
            x0 = np.floor(x).astype(np.intp)
            y1 = np.minimum(y0 + 1, h - 1)
            x1 = np.minimum(x0 + 1, w - 1)
            wy = (y - y0).astype(np.float32)
            wx = (x - x0).astype(np.float32)
            base = starts[:, None]
            idx = np.stack(
                [
                    base + y0 * w + x0,
                    base + y0 * w + x1,
                    base + y1 * w + x0,
                    base + y1 * w + x1,
                ]
            )
            wts = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])
        else:
            idx = np.empty((4, b, n), dtype=np.intp)
            wts = np.empty((4, b, n), dtype=np.float32)
            for p, m in enumerate(map_ids):
                start, _, (h, w) = stacked.span(m)
                corners, weights = _corner_indices(SampledLocations(locs[p]), h, w)
                for k in range(4):
                    idx[k, p] = corners[k] + start
                    wts[k, p] = weights[k]
        from scipy.sparse import csr_matrix

        sample_rows = np.broadcast_to(np.arange(b * n), (4, b * n)).reshape(-1)
        cols = idx.reshape(4, -1).reshape(-1)
        data = wts.reshape(4, -1).reshape(-1).astype(np.float32)
        n_stack_rows = stacked.rows.shape[0]
        self.interp = csr_matrix(
            (data, (sample_rows, cols)), shape=(b * n, n_stack_rows)
        )
        self.interp_t = self.interp.T.tocsr()

    def gather(self, rows: np.ndarray) -> np.ndarray:
        """(B, C, n) samples from (P, C) stacked rows."""
        flat = self.interp @ rows  # (B*n, C)
        return flat.reshape(self.b, self.n, -1).transpose(0, 2, 1)

    def scatter_add(self, grad_rows: np.ndarray, grad_samples: np.ndarray) -> None:
        """Accumulate (B, C, n) sample gradients back into (P, C) rows."""
        g = np.ascontiguousarray(grad_samples.transpose(0, 2, 1)).reshape(
            self.b * self.n, -1
        )
        grad_rows += self.interp_t @ g


def _corr_term_batched(f_s, g_s, s_s, t_s, b, cfg: LossConfig, extra_coeff=None):
    from .losses import corr_loss_batched

    return corr_loss_batched(
        f_s, g_s, s_s, t_s, b,
        zero_clamp=cfg.zero_clamp, spatial_center=cfg.spatial_center,
        extra_coeff=extra_coeff,
    )


def _batch_code_histogram(code_blocks: list[np.ndarray], n_pairs: int, rng) -> SimilarityHistogram:
    sims = []
    for rows in code_blocks:
        unit = normalize_columns(rows.T).T
        ia = rng.integers(0, unit.shape[0], size=n_pairs)
        ib = rng.integers(0, unit.shape[0], size=n_pairs)
        sims.append(np.einsum("nc,nc->n", unit[ia], unit[ib]))
    return histogram_from_similarities(np.concatenate(sims))


def train(config: TrainConfig, dataset: Dataset, out_dir=None) -> TrainResult:
    """Run the full training loop; returns trained head, probes, and log.

    Probes train on detached codes: no probe gradient reaches the head.
    Checkpoints are written under ``out_dir`` when given (every
    ``checkpoint_every`` steps and at the end) together with a JSON-lines
    step log.
    """
    config.validate()
    train_set = five_crop_dataset(dataset) if config.five_crop else dataset
    if len(train_set) < config.batch_size:
        raise ConfigurationError(
            f"dataset has {len(train_set)} entries post-crop; batch needs {config.batch_size}"
        )
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    init_rng, batch_rng, loss_rng, probe_rng, hist_rng = (np.random.default_rng(s) for s in seeds)

    entries = train_set.entries
    channels = config.channels
    if any(e.features.channels != channels for e in entries):
        raise ConfigurationError("all feature maps must match config.channels")
    flat_feats = [e.features.data.reshape(channels, -1) for e in entries]
    shapes = [(e.features.height, e.features.width) for e in entries]
    label_rows = [
        e.labels.data.reshape(-1) if e.labels is not None else None for e in entries
    ]

    pooled = np.stack([global_pool(e.features) for e in entries])
    index = build_knn_index(
        pooled,
        config.k_nn,
        ids=[e.id for e in entries],
        parent_ids=[e.parent_id or e.id for e in entries],
    )

    head = init_head_params(channels, config.code_dim, init_rng)
    head_adam = AdamState.zeros_like(head.tensors())
    cluster_probe: ClusterProbe | None = None
    linear_probe = init_linear_probe(config.code_dim, config.n_classes, lr=config.probe_lr)

    terms = (
        ("self", config.loss.lambda_self, config.loss.b_self, "self"),
        ("knn", config.loss.lambda_knn, config.loss.b_knn, "knn"),
        ("rand", config.loss.lambda_rand, config.loss.b_rand, "rand"),
    )
    n_loc = config.loss.n_locations
    log: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for step in range(config.steps):
        pairing = sample_batch(index, config.batch_size, batch_rng)
        batch = pairing.x
        partners = {"self": batch, "knn": pairing.x_knn, "rand": pairing.x_rand}
        unique_ids = sorted(set(batch.tolist()) | set(pairing.x_knn.tolist()))
        stacked = _StackedMaps(
            flat_feats, shapes, unique_ids, channels, config.dropout_p, loss_rng
        )
        codes_rows, cache = head_forward_matrix(stacked.rows, head, stacked.drop_scale)
        feat_rows = cache.x_tilde
        grad_rows = np.zeros_like(codes_rows)

        total = 0.0
        term_values = {}
        for name, lam, b, partner_key in terms:
            if lam == 0.0:
                term_values[name] = 0.0
                continue
            tgt_ids = partners[partner_key]
            src_locs = loss_rng.random((config.batch_size, n_loc, 2))
            tgt_locs = loss_rng.random((config.batch_size, n_loc, 2))
            src = _PairSampler(stacked, batch, src_locs)
            tgt = _PairSampler(stacked, tgt_ids, tgt_locs)
            f_s = src.gather(feat_rows)
            g_s = tgt.gather(feat_rows)
            s_s = src.gather(codes_rows)
            t_s = tgt.gather(codes_rows)
            extra = None
            if name == "self" and config.loss.crf_self_weight != 0.0:
                grid_sizes = np.array([shapes[m] for m in batch.tolist()])
                extra = smoothness_coeff(src_locs, tgt_locs, grid_sizes, config.loss)
            values, grad_s, grad_t = _corr_term_batched(
                f_s, g_s, s_s, t_s, b, config.loss, extra_coeff=extra
            )
            term_val = float(np.asarray(values, dtype=np.float64).mean())
            term_values[name] = term_val
            total += lam * term_val
            scale = np.float32(lam / config.batch_size)
            src.scatter_add(grad_rows, grad_s * scale)
            tgt.scatter_add(grad_rows, grad_t * scale)

        head_grads, _ = head_backward_matrix(grad_rows, cache)
        adam_step(
            head.tensors(),
            head_grads.tensors(),
            head_adam,
            config.head_lr,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        )
        head.version += 1

        # probes see the step's codes but never propagate into the head
        code_blocks = []
        labeled_blocks = []
        label_blocks = []
        for m in batch.tolist():
            s0, s1, _ = stacked.span(m)
            rows = codes_rows[s0:s1]
            code_blocks.append(rows)
            if label_rows[m] is not None:
                labeled_blocks.append(rows)
                label_blocks.append(label_rows[m])
        probe_rows = np.concatenate(code_blocks, axis=0)
        if cluster_probe is None:
            cluster_probe = init_cluster_probe(
                probe_rows, config.n_classes, probe_rng, lr=config.probe_lr
            )
        closs = cluster_probe_step(probe_rows, cluster_probe)
        lloss = None
        if labeled_blocks:
            lloss = linear_probe_step(
                np.concatenate(labeled_blocks, axis=0),
                np.concatenate(label_blocks),
                linear_probe,
            )

        rec = {
            "step": step,
            "loss": total,
            "loss_self": term_values["self"],
            "loss_knn": term_values["knn"],
            "loss_rand": term_values["rand"],
            "cluster_loss": closs,
            "linear_loss": lloss,
        }
        if (step + 1) % config.log_every == 0 or step == 0:
            hist = _batch_code_histogram(code_blocks[:4], config.hist_pairs, hist_rng)
            rec["similarity_hist"] = hist.counts.tolist()
        log.append(rec)

        if out_dir is not None and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"step_{step + 1:06d}", head, cluster_probe, linear_probe, config)

    if cluster_probe is None:  # zero-step run: seed from the first entry's codes
        codes0, _ = head_forward(entries[0].features, head)
        cluster_probe = init_cluster_probe(
            codes0.data.reshape(config.code_dim, -1).T,
            config.n_classes,
            probe_rng,
            lr=config.probe_lr,
        )
    if out_dir is not None:
        save_checkpoint(out_dir, head, cluster_probe, linear_probe, config)
        with open(out_dir / "train_log.jsonl", "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
    return TrainResult(
        head=head,
        cluster_probe=cluster_probe,
        linear_probe=linear_probe,
        knn_index=index,
        log=log,
        config=config,
    )


def code_similarity_histogram(
    head: HeadParams, dataset: Dataset, n_pairs: int = 2048, seed: int = 0
) -> SimilarityHistogram:
    """Within-image code-similarity histogram aggregated over a dataset."""
    rng = np.random.default_rng(seed)
    blocks = []
    for e in dataset.entries:
        codes, _ = head_forward(e.features, head)
        blocks.append(codes.data.reshape(codes.channels, -1).T)
    return _batch_code_histogram(blocks, n_pairs, rng)


def evaluate(
    head: HeadParams,
    cluster_probe: ClusterProbe,
    linear_probe: LinearProbe | None,
    dataset: Dataset,
) -> EvalReport:
    """Hungarian-matched cluster metrics plus direct linear-probe metrics.

    The matching is computed once on the confusion matrix accumulated over
    the whole labeled dataset, not per image.
    """
    labeled = dataset.labeled()
    if not labeled:
        raise DegenerateInputError("dataset has no labeled entries to evaluate")
    n = cluster_probe.n_clusters
    cluster_preds = []
    linear_preds = []
    gts = []
    for e in labeled:
        codes, _ = head_forward(e.features, head)
        cluster_preds.append(assign_clusters(codes, cluster_probe))
        if linear_probe is not None:
            linear_preds.append(linear_probe_predict(codes, linear_probe))
        gts.append(e.labels)
    confusion = accumulate_confusion(cluster_preds, gts, n, n)
    matching = hungarian_match(confusion)
    cluster_metrics = segmentation_metrics(cluster_preds, gts, matching)
    linear_metrics = (
        segmentation_metrics(linear_preds, gts, None) if linear_probe is not None else None
    )
    return EvalReport(cluster=cluster_metrics, linear=linear_metrics, matching=matching)


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(
    out_dir,
    head: HeadParams,
    cluster_probe: ClusterProbe,
    linear_probe: LinearProbe | None,
    config: TrainConfig,
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    desc = {"head": save_head_params(head, out_dir, prefix="head"), "config": config.to_json()}
    write_feature_archive(
        FeatureMap(cluster_probe.centroids[None, :, :]), out_dir / "cluster_centroids.dfa"
    )
    desc["cluster_probe"] = {"file": "cluster_centroids.dfa", "lr": cluster_probe.lr}
    if linear_probe is not None:
        write_feature_archive(FeatureMap(linear_probe.w[None, :, :]), out_dir / "linear_w.dfa")
        write_feature_archive(
            FeatureMap(linear_probe.b[None, None, :]), out_dir / "linear_b.dfa"
        )
        desc["linear_probe"] = {"w": "linear_w.dfa", "b": "linear_b.dfa", "lr": linear_probe.lr}
    save_descriptor(out_dir / "checkpoint.json", desc)


def load_checkpoint(out_dir):
    out_dir = Path(out_dir)
    desc = load_descriptor(out_dir / "checkpoint.json")
    head = load_head_params(out_dir, desc["head"])
    config = TrainConfig.from_json(desc["config"])
    cent = read_feature_archive(out_dir / desc["cluster_probe"]["file"]).data[0]
    cluster_probe = ClusterProbe(
        centroids=cent.copy(),
        adam=AdamState.zeros_like({"centroids": cent}),
        lr=desc["cluster_probe"]["lr"],
    )
    linear_probe = None
    if "linear_probe" in desc:
        w = read_feature_archive(out_dir / desc["linear_probe"]["w"]).data[0].copy()
        b = read_feature_archive(out_dir / desc["linear_probe"]["b"]).data[0, 0].copy()
        linear_probe = LinearProbe(
            w=w, b=b, adam=AdamState.zeros_like({"w": w, "b": b}), lr=desc["linear_probe"]["lr"]
        )
    return head, cluster_probe, linear_probe, config
