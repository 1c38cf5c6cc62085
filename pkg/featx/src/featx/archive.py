"""Writers for the consumer-side wire formats: DFA1 feature archives,
binary PGM label maps, PPM images, and the JSON dataset manifest.

These are written from the format definitions, not imported from the
consumer package, so this exporter stands alone; the consumer's reader is
used in the tests to prove bitwise round trips.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DFA1"
DTYPE_F32 = 1
HEADER = struct.Struct("<4sBBIII")
IGNORE_LABEL = 255


def write_feature_archive(data: np.ndarray, path) -> None:
    """Write a (C, H, W) float32 array as a DFA1 archive."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"feature archive needs (C,H,W), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to write non-finite features")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, DTYPE_F32, 3, c, h, w))
        fh.write(arr.tobytes())


def write_label_map(labels: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"label map needs (H,W), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def write_image_ppm(img: np.ndarray, path) -> None:
    """(H, W, 3) uint8 or [0,1] float image as binary PPM."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(arr * 255.0 + 0.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def manifest_entry(
    entry_id: str,
    feature_path: str,
    label_path: str | None = None,
    source_image_path: str | None = None,
    crop_parent: str | None = None,
    crop_index: int | None = None,
) -> dict:
    row: dict = {"id": entry_id, "feature_path": feature_path}
    if label_path is not None:
        row["label_path"] = label_path
    if source_image_path is not None:
        row["source_image_path"] = source_image_path
    if crop_parent is not None:
        row["crop_provenance"] = {"parent_id": crop_parent, "crop_index": crop_index}
    return row


def write_manifest(entries: list[dict], path) -> None:
    Path(path).write_text(json.dumps({"entries": entries}, indent=2) + "\n")
