"""In-memory datasets, manifest-backed loading, five-crop expansion, and
the synthetic block-partition corpus used for end-to-end tests.

The synthetic corpus stands in for backbone features: each image is a
random rectangular partition of the grid into classes, and the feature at
a pixel is that class's basis vector pushed through one fixed random
rotation, perturbed with Gaussian noise, and renormalized. At zero noise
the feature correspondences equal the label co-occurrence exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .knn import five_crop, five_crop_labels
from .tensorio import (
    DatasetManifest,
    FeatureMap,
    LabelMap,
    ManifestEntry,
    load_manifest,
    read_feature_archive,
    read_label_map,
    save_manifest,
    write_feature_archive,
    write_label_map,
)


@dataclass
class DatasetEntry:
    id: str
    features: FeatureMap
    labels: LabelMap | None = None
    parent_id: str | None = None
    crop_index: int | None = None
    source_image_path: str | None = None


@dataclass
class Dataset:
    entries: list[DatasetEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> DatasetEntry:
        return self.entries[i]

    def labeled(self) -> list[DatasetEntry]:
        return [e for e in self.entries if e.labels is not None]


def load_dataset(manifest: DatasetManifest | str | Path) -> Dataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    entries = []
    for e in manifest.entries:
        feats = read_feature_archive(manifest.resolve(e.feature_path))
        labels = read_label_map(manifest.resolve(e.label_path)) if e.label_path else None
        entries.append(
            DatasetEntry(
                id=e.id,
                features=feats,
                labels=labels,
                parent_id=e.crop_parent,
                crop_index=e.crop_index,
                source_image_path=(
                    str(manifest.resolve(e.source_image_path)) if e.source_image_path else None
                ),
            )
        )
    return Dataset(entries)


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write features, labels, and a manifest under ``out_dir``.

    Returns the manifest path. Paths inside the manifest are relative so
    the directory can be moved wholesale.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for e in dataset.entries:
        feat_rel = f"{e.id}.dfa"
        write_feature_archive(e.features, out_dir / feat_rel)
        label_rel = None
        if e.labels is not None:
            label_rel = f"{e.id}.pgm"
            write_label_map(e.labels, out_dir / label_rel)
        rows.append(
            ManifestEntry(
                id=e.id,
                feature_path=feat_rel,
                label_path=label_rel,
                crop_parent=e.parent_id,
                crop_index=e.crop_index,
            )
        )
    manifest_path = out_dir / "manifest.json"
    save_manifest(DatasetManifest(entries=rows, root=out_dir), manifest_path)
    return manifest_path


def five_crop_dataset(dataset: Dataset) -> Dataset:
    """Expand every entry into its five half-resolution crops."""
    out = []
    for e in dataset.entries:
        crops = five_crop(e.features)
        label_crops = five_crop_labels(e.labels) if e.labels is not None else [None] * 5
        for k, (fc, lc) in enumerate(zip(crops, label_crops)):
            out.append(
                DatasetEntry(
                    id=f"{e.id}#crop{k}",
                    features=fc,
                    labels=lc,
                    parent_id=e.id,
                    crop_index=k,
                    source_image_path=e.source_image_path,
                )
            )
    return Dataset(out)


def _random_partition(height: int, width: int, n_classes: int, rng: np.random.Generator):
    """Partition the grid into rectangular cells and give each a class."""
    def cuts(size):
        n_cuts = int(rng.integers(1, 4))
        inner = np.sort(rng.choice(np.arange(1, size), size=min(n_cuts, size - 1), replace=False))
        return np.concatenate(([0], inner, [size]))

    ys = cuts(height)
    xs = cuts(width)
    labels = np.zeros((height, width), dtype=np.uint8)
    for i in range(len(ys) - 1):
        for j in range(len(xs) - 1):
            labels[ys[i] : ys[i + 1], xs[j] : xs[j + 1]] = rng.integers(0, n_classes)
    return labels


def make_synthetic_corpus(
    n_images: int,
    grid: int,
    n_classes: int,
    noise_sigma: float,
    seed: int,
    channels: int = 16,
) -> Dataset:
    """Block-partitioned label maps with class-indicator features.

    Features are unit basis vectors of the pixel class, rotated by one
    fixed random orthogonal map shared across the corpus, plus Gaussian
    noise of scale ``noise_sigma``, then renormalized per pixel.
    """
    if n_classes > channels:
        raise ConfigurationError(f"n_classes={n_classes} needs channels >= n_classes")
    rng = np.random.default_rng(seed)
    rotation, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
    class_vectors = rotation[:, :n_classes]  # orthonormal columns
    entries = []
    for i in range(n_images):
        labels = _random_partition(grid, grid, n_classes, rng)
        feats = class_vectors[:, labels.reshape(-1)]  # (C, H*W)
        if noise_sigma > 0:
            feats = feats + rng.normal(0.0, noise_sigma, size=feats.shape)
        norms = np.linalg.norm(feats, axis=0, keepdims=True)
        feats = feats / np.maximum(norms, 1e-12)
        fmap = FeatureMap(feats.reshape(channels, grid, grid).astype(np.float32))
        entries.append(
            DatasetEntry(id=f"synth_{i:04d}", features=fmap, labels=LabelMap(labels))
        )
    return Dataset(entries)
