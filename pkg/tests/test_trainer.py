import json

import numpy as np
import pytest

from corrdistill.corrvol import feature_correspondence, label_cooccurrence
from corrdistill.data import make_synthetic_corpus
from corrdistill.diagnostics import correspondence_ap
from corrdistill.errors import ConfigurationError, DimensionError
from corrdistill.head import init_head_params
from corrdistill.losses import LossConfig
from corrdistill.optim import AdamState, adam_step
from corrdistill.trainer import (
    TrainConfig,
    code_similarity_histogram,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)


def small_config(**overrides):
    base = dict(
        channels=8,
        n_classes=3,
        steps=5,
        loss=LossConfig(n_locations=16, b_self=0.3, b_knn=0.2, b_rand=0.35),
        code_dim=6,
        batch_size=4,
        seed=11,
        k_nn=3,
        five_crop=False,
        log_every=2,
        checkpoint_every=1000,
    )
    base.update(overrides)
    return TrainConfig(**base)


def test_adam_first_step_magnitude():
    p = {"x": np.array([1.0])}
    state = AdamState.zeros_like(p)
    adam_step(p, {"x": np.array([1.0])}, state, lr=0.05)
    # bias-corrected first step moves by ~lr regardless of gradient scale
    assert p["x"][0] == pytest.approx(1.0 - 0.05, abs=1e-6)


def test_adam_zero_gradient_fixed_point():
    p = {"x": np.array([2.5, -1.0])}
    state = AdamState.zeros_like(p)
    for _ in range(10):
        adam_step(p, {"x": np.zeros(2)}, state, lr=0.1)
    assert np.array_equal(p["x"], np.array([2.5, -1.0]))


def test_adam_quadratic_bowl():
    theta = np.array([3.0])
    p = {"x": theta}
    state = AdamState.zeros_like(p)
    for _ in range(1000):
        adam_step(p, {"x": 2 * p["x"]}, state, lr=0.01)
    assert abs(p["x"][0]) < 1e-3


def test_adam_shape_mismatch():
    p = {"x": np.zeros(3)}
    with pytest.raises(DimensionError):
        adam_step(p, {"x": np.zeros(4)}, AdamState.zeros_like(p), lr=0.1)


def test_synthetic_sigma_zero_perfect_ap():
    ds = make_synthetic_corpus(4, 8, 3, noise_sigma=0.0, seed=0, channels=8)
    pairs = [
        (feature_correspondence(e.features, e.features), label_cooccurrence(e.labels, e.labels))
        for e in ds.entries
    ]
    curve = correspondence_ap(pairs)
    assert curve.average_precision == pytest.approx(1.0, abs=1e-6)


def test_synthetic_sigma_small_high_ap():
    ds = make_synthetic_corpus(10, 8, 3, noise_sigma=0.1, seed=1, channels=8)
    pairs = [
        (feature_correspondence(e.features, e.features), label_cooccurrence(e.labels, e.labels))
        for e in ds.entries
    ]
    assert correspondence_ap(pairs).average_precision >= 0.99


def test_synthetic_deterministic():
    a = make_synthetic_corpus(3, 6, 3, 0.2, seed=5, channels=8)
    b = make_synthetic_corpus(3, 6, 3, 0.2, seed=5, channels=8)
    for ea, eb in zip(a.entries, b.entries):
        assert np.array_equal(ea.features.data, eb.features.data)
        assert np.array_equal(ea.labels.data, eb.labels.data)


def test_zero_steps_head_equals_init():
    ds = make_synthetic_corpus(6, 8, 3, 0.1, seed=2, channels=8)
    cfg = small_config(steps=0, batch_size=4)
    result = train(cfg, ds)
    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    expected = init_head_params(8, cfg.code_dim, np.random.default_rng(seeds[0]))
    for name, arr in expected.tensors().items():
        assert np.array_equal(arr, getattr(result.head, name)), name


def test_training_is_deterministic():
    ds = make_synthetic_corpus(8, 8, 3, 0.1, seed=3, channels=8)
    cfg = small_config(steps=12)
    r1 = train(cfg, ds)
    r2 = train(cfg, ds)
    assert json.dumps(r1.log) == json.dumps(r2.log)
    for name, arr in r1.head.tensors().items():
        assert np.array_equal(arr, getattr(r2.head, name)), name
    assert np.array_equal(r1.cluster_probe.centroids, r2.cluster_probe.centroids)
    assert np.array_equal(r1.linear_probe.w, r2.linear_probe.w)


def test_log_is_finite_everywhere():
    ds = make_synthetic_corpus(8, 8, 3, 0.1, seed=4, channels=8)
    result = train(small_config(steps=10), ds)
    assert len(result.log) == 10
    for rec in result.log:
        for key in ("loss", "loss_self", "loss_knn", "loss_rand", "cluster_loss"):
            assert np.isfinite(rec[key]), key


def test_train_rejects_small_dataset():
    ds = make_synthetic_corpus(3, 8, 3, 0.1, seed=5, channels=8)
    with pytest.raises(ConfigurationError):
        train(small_config(batch_size=8), ds)


def test_five_crop_training_runs():
    ds = make_synthetic_corpus(4, 8, 3, 0.1, seed=6, channels=8)
    cfg = small_config(steps=3, five_crop=True, batch_size=6)
    result = train(cfg, ds)  # 20 crops of 4x4
    assert len(result.log) == 3


def test_checkpoint_round_trip(tmp_path):
    ds = make_synthetic_corpus(6, 8, 3, 0.1, seed=7, channels=8)
    result = train(small_config(steps=4), ds)
    save_checkpoint(tmp_path, result.head, result.cluster_probe, result.linear_probe, result.config)
    head, cprobe, lprobe, config = load_checkpoint(tmp_path)
    for name, arr in result.head.tensors().items():
        assert np.array_equal(arr, getattr(head, name))
    assert np.array_equal(cprobe.centroids, result.cluster_probe.centroids)
    assert np.array_equal(lprobe.w, result.linear_probe.w)
    assert config.code_dim == result.config.code_dim

    report = evaluate(head, cprobe, lprobe, ds)
    assert 0.0 <= report.cluster.accuracy <= 1.0
    assert 0.0 <= report.cluster.miou <= 1.0
    assert report.linear is not None


def test_train_writes_log_and_checkpoint(tmp_path):
    ds = make_synthetic_corpus(6, 8, 3, 0.1, seed=8, channels=8)
    train(small_config(steps=4), ds, out_dir=tmp_path)
    assert (tmp_path / "checkpoint.json").exists()
    lines = (tmp_path / "train_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 4
    assert json.loads(lines[0])["step"] == 0


def test_code_histogram_counts_conserved():
    ds = make_synthetic_corpus(4, 8, 3, 0.1, seed=9, channels=8)
    result = train(small_config(steps=2), ds)
    hist = code_similarity_histogram(result.head, ds, n_pairs=256, seed=0)
    assert hist.counts.sum() == 256 * len(ds)


def test_crf_self_option_in_training_loop():
    ds = make_synthetic_corpus(6, 8, 3, 0.1, seed=10, channels=8)
    base = train(small_config(steps=3), ds)
    cfg = small_config(
        steps=3,
        loss=LossConfig(
            n_locations=16, b_self=0.3, b_knn=0.2, b_rand=0.35, crf_self_weight=0.3
        ),
    )
    with_crf = train(cfg, ds)
    assert np.isfinite(with_crf.log[-1]["loss"])
    assert with_crf.log[0]["loss_self"] != base.log[0]["loss_self"]
    assert with_crf.log[0]["loss_knn"] == base.log[0]["loss_knn"]
