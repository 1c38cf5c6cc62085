"""Command-line entry points.

Subcommands: synth, train, eval, diagnose-pr, diagnose-hist, knn-stats,
crf-demo. Training configs are single JSON files matching TrainConfig;
datasets travel as a JSON manifest referencing DFA1 feature archives and
PGM label maps.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import crf as crf_mod
from .corrvol import feature_correspondence, label_cooccurrence
from .data import Dataset, five_crop_dataset, load_dataset, make_synthetic_corpus, save_dataset
from .diagnostics import (
    correspondence_ap,
    similarity_histogram,
    write_hist_csv,
    write_pr_csv,
)
from .errors import ConfigurationError, CorrDistillError
from .head import head_forward
from .knn import build_knn_index, global_pool, self_match_stats, write_self_match_csv
from .probes import ConfusionMatrix
from .tensorio import (
    read_feature_archive,
    read_image_ppm,
    write_image_ppm,
    write_label_map,
)
from .trainer import TrainConfig, evaluate, load_checkpoint, train


def _load_train_config(path) -> TrainConfig:
    return TrainConfig.from_json(json.loads(Path(path).read_text()))


def cmd_synth(args) -> int:
    ds = make_synthetic_corpus(
        n_images=args.images,
        grid=args.grid,
        n_classes=args.classes,
        noise_sigma=args.sigma,
        seed=args.seed,
        channels=args.channels,
    )
    manifest = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} synthetic entries; manifest at {manifest}")
    return 0


def cmd_train(args) -> int:
    config = _load_train_config(args.config)
    dataset = load_dataset(args.data)
    result = train(config, dataset, out_dir=args.out)
    final = result.log[-1] if result.log else {}
    print(f"trained {config.steps} steps; final loss {final.get('loss')}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    head, cluster_probe, linear_probe, _config = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(head, cluster_probe, linear_probe, dataset)
    out = Path(args.out) if args.out else Path(args.checkpoint) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    metrics = {
        "cluster": {
            "accuracy": report.cluster.accuracy,
            "miou": report.cluster.miou,
            "per_class_iou": {str(k): v for k, v in report.cluster.per_class_iou.items()},
        },
        "matching": report.matching.cluster_to_class.tolist(),
    }
    if report.linear is not None:
        metrics["linear"] = {
            "accuracy": report.linear.accuracy,
            "miou": report.linear.miou,
        }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    _write_confusion_csv(report.cluster.confusion, out / "confusion.csv")
    if args.write_predictions:
        from .probes import assign_clusters

        for e in dataset.entries:
            codes, _ = head_forward(e.features, head)
            pred = assign_clusters(codes, cluster_probe)
            write_label_map(pred, out / f"{e.id}_pred.pgm")
    print(json.dumps(metrics["cluster"], indent=2))
    return 0


def _write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w") as fh:
        for row in cm.counts:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def _pair_volumes(dataset: Dataset, score_source: str, params) -> list:
    pairs = []
    for e in dataset.labeled():
        if score_source == "features":
            vol = feature_correspondence(e.features, e.features)
        else:  # crf-kernel baseline scores from the source image
            if e.source_image_path is None:
                raise ConfigurationError(f"entry {e.id} has no source image for the CRF kernel")
            img = read_image_ppm(e.source_image_path)
            if img.shape[:2] != (e.labels.height, e.labels.width):
                raise ConfigurationError(
                    f"entry {e.id}: image {img.shape[:2]} vs labels "
                    f"{(e.labels.height, e.labels.width)}"
                )
            w = crf_mod.kernel_matrix(img, params, zero_diagonal=False)
            h, wd = e.labels.height, e.labels.width
            vol_data = w.reshape(h, wd, h, wd).astype(np.float32)
            from .corrvol import CorrVolume

            vol = CorrVolume(vol_data)
        pairs.append((vol, label_cooccurrence(e.labels, e.labels)))
    return pairs


def cmd_diagnose_pr(args) -> int:
    dataset = load_dataset(args.data)
    params = crf_mod.CrfParams()
    pairs = _pair_volumes(dataset, args.score_source, params)
    curve = correspondence_ap(pairs)
    write_pr_csv(curve, args.out)
    print(f"average precision: {curve.average_precision:.6f} ({len(pairs)} self-pairs)")
    return 0


def cmd_diagnose_hist(args) -> int:
    dataset = load_dataset(args.data)
    if args.checkpoint:
        head, _, _, _ = load_checkpoint(args.checkpoint)
        maps = [head_forward(e.features, head)[0] for e in dataset.entries]
    else:
        maps = [e.features for e in dataset.entries]
    counts = None
    edges = None
    for i, m in enumerate(maps):
        hist = similarity_histogram(m, args.pairs, args.seed + i)
        counts = hist.counts if counts is None else counts + hist.counts
        edges = hist.bin_edges
    from .diagnostics import SimilarityHistogram

    write_hist_csv(SimilarityHistogram(edges, counts), args.out)
    print(f"histogram over {len(maps)} maps written to {args.out}")
    return 0


def cmd_knn_stats(args) -> int:
    dataset = load_dataset(args.data)
    if args.five_crop:
        dataset = five_crop_dataset(dataset)
    pooled = np.stack([global_pool(e.features) for e in dataset.entries])
    index = build_knn_index(
        pooled,
        args.k,
        ids=[e.id for e in dataset.entries],
        parent_ids=[e.parent_id or e.id for e in dataset.entries],
    )
    counts = self_match_stats(index)
    write_self_match_csv(counts, args.out)
    print(f"same-parent neighbor histogram: {counts.tolist()}")
    return 0


def cmd_crf_demo(args) -> int:
    image = read_image_ppm(args.image)
    params = crf_mod.CrfParams(
        a=args.a,
        b=args.b,
        theta_alpha=args.theta_alpha,
        theta_beta=args.theta_beta,
        theta_gamma=args.theta_gamma,
        iterations=args.iterations,
        negative_shift=args.shift,
    )
    if args.unsupervised is None:
        if not args.unary or not args.out:
            raise ConfigurationError("refinement mode needs --unary and --out")
        unary_map = read_feature_archive(args.unary)
        unary = crf_mod.UnaryField(unary_map.data.transpose(1, 2, 0))
        labels = crf_mod.meanfield_refine(unary, image, params)
        write_label_map(labels, args.out)
        print(f"refined labels written to {args.out}")
        return 0

    space = (
        crf_mod.CodeSpace.discrete(args.k)
        if args.unsupervised == "discrete"
        else crf_mod.CodeSpace.continuous(args.dim)
    )
    if args.shift == 0.0:
        params.negative_shift = crf_mod.mean_kernel_weight(image, params)
    solution = crf_mod.unsupervised_potts_solve(
        image, space, params, steps=args.steps, rng=np.random.default_rng(args.seed)
    )
    if solution.labels is not None and args.out:
        write_label_map(solution.labels, args.out)
        print(f"discrete code labels written to {args.out}")
    if space.kind == "continuous" and args.out_codes:
        write_image_ppm(crf_mod.top3_code_image(solution), args.out_codes)
        print(f"top-3 code dimensions written to {args.out_codes}")
    print(
        f"energy: start {solution.energies[0]:.4f} -> final {solution.energies[-1]:.4f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrdistill")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--channels", type=int, default=16)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the segmentation head and probes")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--write-predictions", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose-pr", help="precision-recall of correspondences vs labels")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--score-source", choices=("features", "crf-kernel"), default="features"
    )
    p.set_defaults(func=cmd_diagnose_pr)

    p = sub.add_parser("diagnose-hist", help="histogram of within-image similarities")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", help="histogram codes from this checkpoint instead of raw features")
    p.set_defaults(func=cmd_diagnose_hist)

    p = sub.add_parser("knn-stats", help="same-parent crop statistics of the KNN table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--five-crop", action="store_true", default=True)
    p.add_argument("--no-five-crop", dest="five_crop", action="store_false")
    p.set_defaults(func=cmd_knn_stats)

    p = sub.add_parser("crf-demo", help="mean-field refinement or unsupervised Potts solve")
    p.add_argument("--image", required=True, help="PPM input image")
    p.add_argument("--unary", help="DFA1 archive of (K',H,W) log-potentials")
    p.add_argument("--out", help="output PGM label map")
    p.add_argument("--unsupervised", choices=("discrete", "continuous"))
    p.add_argument("--k", type=int, default=2, help="discrete label count")
    p.add_argument("--dim", type=int, default=8, help="continuous code dimension")
    p.add_argument("--out-codes", help="output PPM of top-3 continuous code dims")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift", type=float, default=0.0, help="negative shift; 0 = mean kernel weight")
    p.add_argument("--a", type=float, default=4.0)
    p.add_argument("--b", type=float, default=3.0)
    p.add_argument("--theta-alpha", type=float, default=67.0)
    p.add_argument("--theta-beta", type=float, default=3.0)
    p.add_argument("--theta-gamma", type=float, default=1.0)
    p.add_argument("--iterations", type=int, default=10)
    p.set_defaults(func=cmd_crf_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CorrDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
