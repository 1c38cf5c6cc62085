"""featx command line: export dense backbone features for a directory of
images into DFA1 archives + PGM labels + a JSON manifest."""

from __future__ import annotations

import argparse
import sys

from .export import ExportSpec, export_features
from .models import MODEL_NAMES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featx")
    parser.add_argument("--images", required=True, help="directory of input images")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--model", choices=MODEL_NAMES, default="dino-vit-s")
    parser.add_argument("--resize", choices=("train", "eval"), default="train",
                        help="train = minor axis 224, eval = minor axis 320")
    parser.add_argument("--labels", help="directory of label images (stem-matched)")
    parser.add_argument("--five-crop", action="store_true")
    parser.add_argument("--crop-order", choices=("crop-then-resize", "resize-then-crop"),
                        default="crop-then-resize")
    parser.add_argument("--checkpoint", help="local checkpoint (mocov2/resnet50)")
    parser.add_argument("--no-source-images", dest="source_images", action="store_false")
    parser.add_argument("--seed", type=int, default=0, help="random-vit init seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        model=args.model,
        resize=args.resize,
        out_dir=args.out,
        five_crop=args.five_crop,
        crop_order=args.crop_order,
        checkpoint_path=args.checkpoint,
        labels_dir=args.labels,
        write_source_images=args.source_images,
        seed=args.seed,
    )
    report = export_features(args.images, spec)
    print(f"exported {len(report.exported)} entries -> {report.manifest_path}")
    for path, err in report.failed.items():
        print(f"failed: {path}: {err}", file=sys.stderr)
    return 0 if not report.failed else 1


if __name__ == "__main__":
    sys.exit(main())
