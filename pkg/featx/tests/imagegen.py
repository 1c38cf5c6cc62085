"""Synthetic labeled scenes for exporter tests: images of colored
rectangles where the label id is the color index."""

from __future__ import annotations

import numpy as np
from PIL import Image

PALETTE = np.array(
    [
        [40, 40, 200],
        [200, 50, 40],
        [40, 180, 60],
        [230, 200, 40],
        [150, 60, 200],
    ],
    dtype=np.uint8,
)


def make_scene(side: int, n_classes: int, rng: np.random.Generator):
    """Returns (image uint8 (H,W,3), labels uint8 (H,W))."""
    labels = np.zeros((side, side), np.uint8)
    for _ in range(6):
        cls = int(rng.integers(0, n_classes))
        y0, x0 = rng.integers(0, side - 4, size=2)
        h, w = rng.integers(side // 4, side // 2, size=2)
        labels[y0 : y0 + h, x0 : x0 + w] = cls
    img = PALETTE[labels % len(PALETTE)]
    noise = rng.normal(0, 6, size=img.shape)
    img = np.clip(img.astype(np.float64) + noise, 0, 255).astype(np.uint8)
    return img, labels


def write_scene_dir(out_dir, n_images: int, side: int, n_classes: int, seed: int):
    """Writes images/ and labels/ under out_dir; returns the two dirs."""
    rng = np.random.default_rng(seed)
    img_dir = out_dir / "images"
    lbl_dir = out_dir / "labels"
    img_dir.mkdir(parents=True, exist_ok=True)
    lbl_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_images):
        img, labels = make_scene(side, n_classes, rng)
        Image.fromarray(img).save(img_dir / f"scene_{i:03d}.png")
        Image.fromarray(labels, mode="L").save(lbl_dir / f"scene_{i:03d}.png")
    return img_dir, lbl_dir
