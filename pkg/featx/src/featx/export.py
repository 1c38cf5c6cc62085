"""The export pipeline: images (and optional labels) in, DFA1 archives,
PGM grid labels, PPM source crops, and one JSON manifest out.

Deterministic by construction: inference runs in no-grad eval mode on CPU
and the same image always produces a bitwise-identical archive. Files
that fail to decode are reported and skipped; the run continues.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .archive import (
    manifest_entry,
    write_feature_archive,
    write_image_ppm,
    write_label_map,
    write_manifest,
)
from .models import Backbone, load_backbone, to_input_tensor
from .preprocess import (
    EVAL_MINOR_AXIS,
    TRAIN_MINOR_AXIS,
    five_crop,
    labels_to_grid,
    load_image,
    load_labels,
    standard_resize,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".bmp")


@dataclass
class ExportSpec:
    model: str = "dino-vit-s"
    resize: str = "train"  # train = 224 minor axis, eval = 320
    out_dir: str = "features"
    five_crop: bool = False
    crop_order: str = "crop-then-resize"  # or "resize-then-crop"
    checkpoint_path: str | None = None
    labels_dir: str | None = None
    write_source_images: bool = True
    seed: int = 0  # random-vit initialization only

    @property
    def minor_axis(self) -> int:
        if self.resize == "train":
            return TRAIN_MINOR_AXIS
        if self.resize == "eval":
            return EVAL_MINOR_AXIS
        raise ValueError(f"resize rule must be 'train' or 'eval', got {self.resize!r}")

    def validate(self) -> "ExportSpec":
        _ = self.minor_axis
        if self.crop_order not in ("crop-then-resize", "resize-then-crop"):
            raise ValueError(f"unknown crop order {self.crop_order!r}")
        return self


@dataclass
class ExportReport:
    manifest_path: Path
    exported: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def _find_labels(image_path: Path, labels_dir: str | None):
    if labels_dir is None:
        return None
    for suffix in (".png", ".pgm"):
        cand = Path(labels_dir) / (image_path.stem + suffix)
        if cand.exists():
            return cand
    return None


def _views(img, labels, spec: ExportSpec):
    """Yield (view_id_suffix, crop_index, image_view, label_view)."""
    if not spec.five_crop:
        yield "", None, img, labels
        return
    crops = five_crop(img)
    label_crops = five_crop(labels) if labels is not None else [None] * 5
    for k, (ic, lc) in enumerate(zip(crops, label_crops)):
        yield f"#crop{k}", k, ic, lc


def export_features(image_dir, spec: ExportSpec, backbone: Backbone | None = None) -> ExportReport:
    """Export every image under ``image_dir`` following ``spec``; returns a report.

    With five-crop enabled each crop becomes its own manifest entry with
    crop provenance. The default order crops the original image first and
    then applies the minor-axis resize rule to each crop.
    """
    spec.validate()
    if backbone is None:
        backbone = load_backbone(spec.model, spec.checkpoint_path, seed=spec.seed)
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_grad_enabled(False)

    image_paths = sorted(
        p for p in Path(image_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    entries = []
    report = ExportReport(manifest_path=out_dir / "manifest.json")
    for path in image_paths:
        try:
            img = load_image(path)
            label_path = _find_labels(path, spec.labels_dir)
            labels = load_labels(label_path) if label_path else None
            if spec.crop_order == "resize-then-crop":
                img = standard_resize(img, spec.minor_axis)
                if labels is not None:
                    labels = standard_resize(labels, spec.minor_axis, nearest=True)
            for suffix, crop_idx, view, view_labels in _views(img, labels, spec):
                entry_id = path.stem + suffix
                square = standard_resize(view, spec.minor_axis)
                feats = backbone.extract(to_input_tensor(square))[0].numpy()
                feat_rel = f"{entry_id}.dfa"
                write_feature_archive(feats.astype(np.float32), out_dir / feat_rel)
                label_rel = None
                if view_labels is not None:
                    grid = labels_to_grid(
                        standard_resize(view_labels, spec.minor_axis, nearest=True),
                        feats.shape[1],
                        feats.shape[2],
                    )
                    label_rel = f"{entry_id}.pgm"
                    write_label_map(grid, out_dir / label_rel)
                source_rel = None
                if spec.write_source_images:
                    # stored at feature-grid resolution so kernel baselines
                    # score exactly the same location pairs as the features
                    from PIL import Image

                    grid_img = np.asarray(
                        Image.fromarray(square).resize(
                            (feats.shape[2], feats.shape[1]), Image.BILINEAR
                        )
                    )
                    source_rel = f"{entry_id}_src.ppm"
                    write_image_ppm(grid_img, out_dir / source_rel)
                entries.append(
                    manifest_entry(
                        entry_id,
                        feat_rel,
                        label_path=label_rel,
                        source_image_path=source_rel,
                        crop_parent=path.stem if crop_idx is not None else None,
                        crop_index=crop_idx,
                    )
                )
                report.exported.append(entry_id)
        except Exception as exc:  # per-file failure: record and continue
            report.failed[str(path)] = f"{type(exc).__name__}: {exc}"
    write_manifest(entries, report.manifest_path)
    return report
