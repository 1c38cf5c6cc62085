"""Image geometry: minor-axis resize, center crop, and five-crop.

Images resize bilinearly; label maps resize with nearest neighbor so class
ids never blend. The five crops are the four corners plus the center at
half the original size, indexed 0-4 in that order.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

TRAIN_MINOR_AXIS = 224
EVAL_MINOR_AXIS = 320

CROP_NAMES = ("top_left", "top_right", "bottom_left", "bottom_right", "center")


def load_image(path) -> np.ndarray:
    """(H, W, 3) uint8 RGB."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_labels(path) -> np.ndarray:
    """(H, W) uint8 class ids (255 = ignore)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: label image must be single-channel, got {arr.shape}")
    return arr.astype(np.uint8)


def resize_minor_axis(img: np.ndarray, target: int, nearest: bool = False) -> np.ndarray:
    h, w = img.shape[:2]
    scale = target / min(h, w)
    new_h, new_w = round(h * scale), round(w * scale)
    resample = Image.NEAREST if nearest else Image.BILINEAR
    return np.asarray(Image.fromarray(img).resize((new_w, new_h), resample))


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    y0 = (h - size) // 2
    x0 = (w - size) // 2
    return img[y0 : y0 + size, x0 : x0 + size]


def standard_resize(img: np.ndarray, minor_axis: int, nearest: bool = False) -> np.ndarray:
    """Scale the minor axis to ``minor_axis`` then center crop to a square."""
    return center_crop(resize_minor_axis(img, minor_axis, nearest), minor_axis)


def five_crop(img: np.ndarray) -> list[np.ndarray]:
    """Four corner crops plus center crop at half height and width."""
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"five-crop needs at least 2x2, got {h}x{w}")
    hc, wc = h // 2, w // 2
    boxes = [
        (0, 0),
        (0, w - wc),
        (h - hc, 0),
        (h - hc, w - wc),
        ((h - hc) // 2, (w - wc) // 2),
    ]
    return [img[y0 : y0 + hc, x0 : x0 + wc] for y0, x0 in boxes]


def labels_to_grid(labels: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Nearest-neighbor downsample of labels onto the feature grid."""
    im = Image.fromarray(labels)
    return np.asarray(im.resize((grid_w, grid_h), Image.NEAREST)).astype(np.uint8)
