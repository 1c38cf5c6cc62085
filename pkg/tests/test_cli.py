import json

import numpy as np
import pytest

from corrdistill.cli import main
from corrdistill.losses import LossConfig
from corrdistill.tensorio import (
    FeatureMap,
    read_feature_archive,
    read_label_map,
    write_feature_archive,
    write_image_ppm,
)
from corrdistill.trainer import TrainConfig


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    rc = main([
        "synth", "--seed", "3", "--out", str(out),
        "--images", "10", "--grid", "8", "--classes", "3", "--sigma", "0.1",
        "--channels", "8",
    ])
    assert rc == 0
    return out


def test_synth_writes_manifest(synth_dir):
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert len(manifest["entries"]) == 10
    first = manifest["entries"][0]
    fmap = read_feature_archive(synth_dir / first["feature_path"])
    assert fmap.channels == 8 and fmap.height == 8
    labels = read_label_map(synth_dir / first["label_path"])
    assert labels.data.max() < 3


def test_train_then_eval(tmp_path, synth_dir):
    cfg = TrainConfig(
        channels=8, n_classes=3, steps=6,
        loss=LossConfig(n_locations=16),
        code_dim=8, batch_size=4, seed=0, k_nn=3, five_crop=False,
    )
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_json()))
    out = tmp_path / "run"
    rc = main([
        "train", "--config", str(cfg_path),
        "--data", str(synth_dir / "manifest.json"), "--out", str(out),
    ])
    assert rc == 0
    assert (out / "checkpoint.json").exists()
    assert (out / "train_log.jsonl").exists()

    rc = main([
        "eval", "--checkpoint", str(out),
        "--data", str(synth_dir / "manifest.json"),
        "--out", str(tmp_path / "eval"), "--write-predictions",
    ])
    assert rc == 0
    metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert 0.0 <= metrics["cluster"]["accuracy"] <= 1.0
    assert (tmp_path / "eval" / "confusion.csv").exists()
    assert (tmp_path / "eval" / "synth_0000_pred.pgm").exists()


def test_diagnose_pr(tmp_path, synth_dir):
    out = tmp_path / "pr.csv"
    rc = main(["diagnose-pr", "--data", str(synth_dir / "manifest.json"), "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "threshold,precision,recall"
    assert len(lines) > 2


def test_diagnose_hist(tmp_path, synth_dir):
    out = tmp_path / "hist.csv"
    rc = main([
        "diagnose-hist", "--data", str(synth_dir / "manifest.json"),
        "--out", str(out), "--pairs", "256", "--seed", "1",
    ])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "bin_left,bin_right,count"
    assert len(lines) == 65
    counts = [int(l.split(",")[2]) for l in lines[1:]]
    assert sum(counts) == 256 * 10


def test_knn_stats(tmp_path, synth_dir):
    out = tmp_path / "knn.csv"
    rc = main([
        "knn-stats", "--data", str(synth_dir / "manifest.json"),
        "--out", str(out), "--k", "5",
    ])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "same_parent_neighbors,count"
    counts = [int(l.split(",")[1]) for l in lines[1:]]
    assert sum(counts) == 50  # 10 images five-cropped


def test_crf_demo_refine(tmp_path):
    side = 16
    img = np.zeros((side, side, 3))
    img[:, side // 2 :] = 1.0
    write_image_ppm(img, tmp_path / "img.ppm")
    rng = np.random.default_rng(0)
    unary = np.where(
        (np.arange(side)[None, :, None] >= side // 2), [0.1, 1.0], [1.0, 0.1]
    ).astype(np.float32)
    unary = np.broadcast_to(unary, (side, side, 2))
    write_feature_archive(
        FeatureMap(np.ascontiguousarray(unary.transpose(2, 0, 1))), tmp_path / "unary.dfa"
    )
    rc = main([
        "crf-demo", "--image", str(tmp_path / "img.ppm"),
        "--unary", str(tmp_path / "unary.dfa"), "--out", str(tmp_path / "ref.pgm"),
    ])
    assert rc == 0
    labels = read_label_map(tmp_path / "ref.pgm")
    assert labels.data.shape == (side, side)


def test_crf_demo_unsupervised(tmp_path):
    side = 16
    img = np.zeros((side, side, 3))
    img[:, side // 2 :] = 1.0
    write_image_ppm(img, tmp_path / "img.ppm")
    rc = main([
        "crf-demo", "--image", str(tmp_path / "img.ppm"),
        "--unsupervised", "discrete", "--k", "2",
        "--steps", "100", "--out", str(tmp_path / "seg.pgm"),
    ])
    assert rc == 0
    labels = read_label_map(tmp_path / "seg.pgm").data
    assert set(np.unique(labels)) <= {0, 1}

    rc = main([
        "crf-demo", "--image", str(tmp_path / "img.ppm"),
        "--unsupervised", "continuous", "--dim", "6",
        "--steps", "80", "--out-codes", str(tmp_path / "codes.ppm"),
    ])
    assert rc == 0
    assert (tmp_path / "codes.ppm").exists()


def test_cli_reports_errors(tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(tmp_path / "x.json")])
    assert rc == 2
