"""Binary feature archives, PGM/PPM label and image maps, and dataset manifests.

The feature-archive format (`DFA1`) is fixed little-endian for
cross-language exporter compatibility:

    bytes 0-3   magic ``DFA1``
    byte  4     dtype code, u8 (1 = float32)
    byte  5     rank, u8 (always 3)
    bytes 6-17  dims C, H, W as little-endian u32
    bytes 18-   C*H*W float32 values, channel-major then row-major

Label maps are binary PGM (P5, maxval 255) with 255 reserved as the
IGNORE sentinel, so at most 254 classes are representable. Images for
CRF demos are binary PPM (P6).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArchiveError,
    BadMagicError,
    DimensionError,
    ManifestError,
    NonFiniteError,
    SizeMismatchError,
    UnsupportedDtypeError,
)

MAGIC = b"DFA1"
DTYPE_F32 = 1
HEADER = struct.Struct("<4sBBIII")  # magic, dtype, rank, C, H, W

IGNORE_LABEL = 255

NORM_EPS = 1e-8


@dataclass
class FeatureMap:
    """A dense C x H x W float32 feature tensor for one image.

    ``data`` is stored channel-major then row-major, matching the
    on-disk archive layout.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"feature map must be 3-d (C,H,W), got shape {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def validate(self) -> "FeatureMap":
        if min(self.data.shape) < 1:
            raise DimensionError(f"feature map dims must be positive, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("feature map contains non-finite values")
        return self


@dataclass
class LabelMap:
    """Per-pixel class indices with 255 reserved for IGNORE."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            raise DimensionError(f"label map must be 2-d (H,W), got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def validate(self, n_classes: int) -> "LabelMap":
        if n_classes > IGNORE_LABEL - 1:
            raise DimensionError(f"at most {IGNORE_LABEL - 1} classes supported, got {n_classes}")
        bad = (self.data != IGNORE_LABEL) & (self.data >= n_classes)
        if bad.any():
            raise DimensionError(f"label map contains values >= n_classes={n_classes}")
        return self


@dataclass
class ManifestEntry:
    id: str
    feature_path: str
    label_path: str | None = None
    source_image_path: str | None = None
    crop_parent: str | None = None
    crop_index: int | None = None  # 0..4; None when not a crop

    def to_json(self) -> dict:
        d = {"id": self.id, "feature_path": self.feature_path}
        if self.label_path is not None:
            d["label_path"] = self.label_path
        if self.source_image_path is not None:
            d["source_image_path"] = self.source_image_path
        if self.crop_parent is not None:
            d["crop_provenance"] = {"parent_id": self.crop_parent, "crop_index": self.crop_index}
        return d

    @staticmethod
    def from_json(d: dict) -> "ManifestEntry":
        prov = d.get("crop_provenance")
        return ManifestEntry(
            id=d["id"],
            feature_path=d["feature_path"],
            label_path=d.get("label_path"),
            source_image_path=d.get("source_image_path"),
            crop_parent=prov["parent_id"] if prov else None,
            crop_index=prov.get("crop_index") if prov else None,
        )


@dataclass
class DatasetManifest:
    """Ordered list of dataset entries; paths resolve relative to ``root``."""

    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, relpath: str) -> Path:
        p = Path(relpath)
        return p if p.is_absolute() else self.root / p


def write_feature_archive(fmap: FeatureMap, path) -> None:
    """Write ``fmap`` to ``path`` in the DFA1 format."""
    fmap.validate()
    c, h, w = fmap.data.shape
    payload = fmap.data.astype("<f4", copy=False).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, DTYPE_F32, 3, c, h, w))
            fh.write(payload)
    except OSError as exc:
        raise ArchiveError(f"cannot write feature archive {path}: {exc}") from exc


def read_feature_archive(path) -> FeatureMap:
    """Read a DFA1 archive; exact inverse of :func:`write_feature_archive`."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ArchiveError(f"cannot read feature archive {path}: {exc}") from exc
    if len(raw) < HEADER.size or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a DFA1 archive")
    _, dtype, rank, c, h, w = HEADER.unpack_from(raw)
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{path}: unsupported dtype code {dtype}")
    if rank != 3:
        raise UnsupportedDtypeError(f"{path}: unsupported rank {rank}")
    expected = c * h * w * 4
    if len(raw) - HEADER.size != expected:
        raise SizeMismatchError(
            f"{path}: payload is {len(raw) - HEADER.size} bytes, dims imply {expected}"
        )
    if min(c, h, w) < 1:
        raise SizeMismatchError(f"{path}: non-positive dims ({c},{h},{w})")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(c, h, w)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{path}: archive contains non-finite values")
    return FeatureMap(data.copy())


def l2_normalize_channels(fmap: FeatureMap, eps: float = NORM_EPS) -> FeatureMap:
    """L2-normalize the channel vector at every spatial location.

    Zero vectors stay zero: norms are floored at ``eps`` instead of
    dividing by zero.
    """
    return FeatureMap(normalize_columns(fmap.data.reshape(fmap.channels, -1), eps).reshape(fmap.data.shape))


def normalize_columns(mat: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Normalize each column of a (C, n) matrix to unit L2 norm with an eps floor."""
    norms = np.sqrt((mat * mat).sum(axis=0, keepdims=True))
    return mat / np.maximum(norms, eps)


# --- PGM / PPM ---------------------------------------------------------------


def _read_netpbm(path, magic: str, bands: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(magic.encode()):
        raise BadMagicError(f"{path}: expected {magic} netpbm file")
    # header tokens: magic, width, height, maxval; '#' starts a comment line
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SizeMismatchError(f"{path}: truncated netpbm header")
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = tokens
    if maxval != 255:
        raise UnsupportedDtypeError(f"{path}: only maxval 255 supported, got {maxval}")
    need = width * height * bands
    body = raw[pos : pos + need]
    if len(body) != need:
        raise SizeMismatchError(f"{path}: expected {need} pixel bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    shape = (height, width) if bands == 1 else (height, width, bands)
    return arr.reshape(shape).copy()


def read_label_map(path) -> LabelMap:
    """Read a binary PGM (P5) label map."""
    return LabelMap(_read_netpbm(path, "P5", 1))


def write_label_map(lmap: LabelMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P5\n{lmap.width} {lmap.height}\n255\n".encode())
        fh.write(lmap.data.tobytes())


def read_image_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) image as an (H, W, 3) float array in [0, 1]."""
    return _read_netpbm(path, "P6", 3).astype(np.float64) / 255.0


def write_image_ppm(img: np.ndarray, path) -> None:
    """Write an (H, W, 3) array in [0, 1] as binary PPM."""
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"PPM image must be (H,W,3), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


# --- Manifest ----------------------------------------------------------------


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Load a JSON manifest, rejecting duplicate ids and dangling paths."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot load manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ManifestError(f"{path}: manifest must be an object with an 'entries' list")
    entries = [ManifestEntry.from_json(e) for e in doc["entries"]]
    seen: set[str] = set()
    for e in entries:
        if e.id in seen:
            raise ManifestError(f"{path}: duplicate manifest id {e.id!r}")
        seen.add(e.id)
        if e.crop_index is not None and not 0 <= e.crop_index <= 4:
            raise ManifestError(f"{path}: entry {e.id!r} has crop_index {e.crop_index}")
    manifest = DatasetManifest(entries=entries, root=path.parent)
    if check_paths:
        for e in entries:
            for rel in (e.feature_path, e.label_path, e.source_image_path):
                if rel is not None and not manifest.resolve(rel).exists():
                    raise ManifestError(f"{path}: entry {e.id!r} references missing file {rel}")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {"entries": [e.to_json() for e in manifest.entries]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
