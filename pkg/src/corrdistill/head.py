"""Segmentation head (linear branch + two-layer ReLU MLP, summed), channel
dropout, bilinear grid sampling, and exact hand-derived backpropagation.

The head maps backbone features with C channels to a K-dimensional code
space, K < C in intended use. There is no general autodiff here: the
backward passes are written for exactly this architecture and are checked
against finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArchiveError, ContractViolationError, DimensionError
from .tensorio import FeatureMap, read_feature_archive, write_feature_archive

TENSOR_NAMES = ("w_lin", "b_lin", "w1", "b1", "w2", "b2")


@dataclass
class HeadParams:
    """Weights of the linear branch and the two-layer MLP (hidden width = C).

    ``version`` increments on every optimizer update; forward caches record
    it so a backward pass against mutated parameters is rejected.
    """

    w_lin: np.ndarray  # (C, K)
    b_lin: np.ndarray  # (K,)
    w1: np.ndarray  # (C, C)
    b1: np.ndarray  # (C,)
    w2: np.ndarray  # (C, K)
    b2: np.ndarray  # (K,)
    version: int = 0

    @property
    def in_channels(self) -> int:
        return self.w_lin.shape[0]

    @property
    def code_dim(self) -> int:
        return self.w_lin.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}


@dataclass
class HeadGrads:
    w_lin: np.ndarray
    b_lin: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def zeros_like(params: HeadParams) -> "HeadGrads":
        return HeadGrads(**{k: np.zeros_like(v) for k, v in params.tensors().items()})

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def add_(self, other: "HeadGrads") -> "HeadGrads":
        for name in TENSOR_NAMES:
            getattr(self, name).__iadd__(getattr(other, name))
        return self


def init_head_params(in_channels: int, code_dim: int, rng: np.random.Generator) -> HeadParams:
    """Uniform +-1/sqrt(fan_in) initialization for all tensors."""

    def uniform(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    c, k = in_channels, code_dim
    return HeadParams(
        w_lin=uniform(c, c, k),
        b_lin=uniform(c, k),
        w1=uniform(c, c, c),
        b1=uniform(c, c),
        w2=uniform(c, c, k),
        b2=uniform(c, k),
    )


@dataclass
class DropoutMask:
    """Channel-wise inverted-dropout mask: kept channels scale by 1/p_keep."""

    keep: np.ndarray  # (C,) bool
    p_keep: float

    @property
    def scale(self) -> np.ndarray:
        return (self.keep.astype(np.float32)) / np.float32(self.p_keep)


def sample_dropout_mask(channels: int, p_drop: float, rng: np.random.Generator) -> DropoutMask:
    keep = rng.random(channels) >= p_drop
    return DropoutMask(keep=keep, p_keep=1.0 - p_drop)


def apply_channel_dropout(f: FeatureMap, mask: DropoutMask) -> FeatureMap:
    return FeatureMap(f.data * mask.scale[:, None, None])


@dataclass
class HeadCache:
    x_tilde: np.ndarray  # (P, C) post-dropout input rows
    relu_mask: np.ndarray  # (P, C) bool, pre-activation > 0
    drop_scale: np.ndarray | None  # (C,) or (P, C), None when no dropout
    params: HeadParams
    version: int
    spatial: tuple[int, int] | None


def head_forward_matrix(
    x: np.ndarray, params: HeadParams, drop_scale: np.ndarray | None = None
) -> tuple[np.ndarray, HeadCache]:
    """Forward over row-major location matrix ``x`` of shape (P, C).

    ``drop_scale`` may be a per-channel (C,) vector or a per-row (P, C)
    array (stacked maps with distinct masks).
    """
    if x.ndim != 2 or x.shape[1] != params.in_channels:
        raise DimensionError(f"input rows have {x.shape} but head expects C={params.in_channels}")
    x_tilde = x if drop_scale is None else x * drop_scale
    z1 = x_tilde @ params.w1 + params.b1
    relu_mask = z1 > 0
    a1 = np.where(relu_mask, z1, 0.0)
    s = x_tilde @ params.w_lin + params.b_lin + a1 @ params.w2 + params.b2
    cache = HeadCache(x_tilde, relu_mask, drop_scale, params, params.version, None)
    return s, cache


def head_backward_matrix(grad_s: np.ndarray, cache: HeadCache) -> tuple[HeadGrads, np.ndarray]:
    """Exact gradients w.r.t. all parameters and the raw input rows."""
    params = cache.params
    if params.version != cache.version:
        raise ContractViolationError("head cache is stale: parameters changed since forward")
    if grad_s.shape != (cache.x_tilde.shape[0], params.code_dim):
        raise DimensionError(f"grad_s shape {grad_s.shape} does not match forward output")
    x_tilde = cache.x_tilde
    z1 = x_tilde @ params.w1 + params.b1
    a1 = np.where(cache.relu_mask, z1, 0.0)

    grad_w2 = a1.T @ grad_s
    grad_b2 = grad_s.sum(axis=0)
    grad_z1 = np.where(cache.relu_mask, grad_s @ params.w2.T, 0.0)
    grad_w1 = x_tilde.T @ grad_z1
    grad_b1 = grad_z1.sum(axis=0)
    grad_w_lin = x_tilde.T @ grad_s
    grad_b_lin = grad_s.sum(axis=0)
    grad_x = grad_s @ params.w_lin.T + grad_z1 @ params.w1.T
    if cache.drop_scale is not None:
        grad_x = grad_x * cache.drop_scale
    grads = HeadGrads(
        w_lin=grad_w_lin.astype(np.float32),
        b_lin=grad_b_lin.astype(np.float32),
        w1=grad_w1.astype(np.float32),
        b1=grad_b1.astype(np.float32),
        w2=grad_w2.astype(np.float32),
        b2=grad_b2.astype(np.float32),
    )
    return grads, grad_x


def head_forward(
    f: FeatureMap, params: HeadParams, mask: DropoutMask | None = None
) -> tuple[FeatureMap, HeadCache]:
    """Apply the head at every location of ``f``; returns codes and a cache."""
    x = f.data.reshape(f.channels, -1).T
    scale = mask.scale if mask is not None else None
    s, cache = head_forward_matrix(x, params, scale)
    cache.spatial = (f.height, f.width)
    codes = FeatureMap(s.T.reshape(params.code_dim, f.height, f.width))
    return codes, cache


def head_backward(grad_codes: FeatureMap, cache: HeadCache) -> tuple[HeadGrads, FeatureMap]:
    """Gradients of a scalar loss w.r.t. head params and the input map."""
    k = cache.params.code_dim
    grads, grad_x = head_backward_matrix(grad_codes.data.reshape(k, -1).T, cache)
    if cache.spatial is None:
        raise ContractViolationError("cache was produced by the matrix API, not head_forward")
    h, w = cache.spatial
    grad_f = FeatureMap(grad_x.T.reshape(cache.params.in_channels, h, w).astype(np.float32))
    return grads, grad_f


# --- bilinear grid sampling ---------------------------------------------------


@dataclass
class SampledLocations:
    """n continuous (y, x) coordinates in [0, 1]^2."""

    coords: np.ndarray  # (n, 2) float64

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise DimensionError(f"locations must be (n, 2), got {self.coords.shape}")
        if self.coords.size and (self.coords.min() < 0.0 or self.coords.max() > 1.0):
            raise DimensionError("sampled locations must lie in [0, 1]^2")

    def __len__(self) -> int:
        return self.coords.shape[0]


def sample_locations(n: int, rng: np.random.Generator) -> SampledLocations:
    return SampledLocations(rng.random((n, 2)))


def grid_locations(height: int, width: int) -> SampledLocations:
    """One location exactly on every grid point (align-corners coordinates)."""
    ys = np.zeros(height) if height == 1 else np.arange(height) / (height - 1)
    xs = np.zeros(width) if width == 1 else np.arange(width) / (width - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return SampledLocations(np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1))


@dataclass
class BilinearCache:
    shape: tuple[int, int, int]
    idx00: np.ndarray
    idx01: np.ndarray
    idx10: np.ndarray
    idx11: np.ndarray
    weights: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] = field(repr=False)


def _corner_indices(locs: SampledLocations, height: int, width: int):
    y = locs.coords[:, 0] * (height - 1) if height > 1 else np.zeros(len(locs))
    x = locs.coords[:, 1] * (width - 1) if width > 1 else np.zeros(len(locs))
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    wy = y - y0
    wx = x - x0
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    flat = lambda yy, xx: yy * width + xx
    return (flat(y0, x0), flat(y0, x1), flat(y1, x0), flat(y1, x1)), (w00, w01, w10, w11)


def bilinear_sample(fmap, locs: SampledLocations) -> tuple[np.ndarray, BilinearCache]:
    """Sample channel vectors at continuous locations, align-corners convention.

    Corner pixels sit at coordinates 0 and 1 exactly. Accepts a FeatureMap
    or a raw (C, H, W) array; returns a (C, n) matrix plus the cache needed
    to push gradients back onto the map.
    """
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    if data.ndim != 3:
        raise DimensionError(f"bilinear sampling needs a (C,H,W) map, got {data.shape}")
    _, height, width = data.shape
    (i00, i01, i10, i11), (w00, w01, w10, w11) = _corner_indices(locs, height, width)
    if np.issubdtype(data.dtype, np.floating):
        w00, w01, w10, w11 = (w.astype(data.dtype, copy=False) for w in (w00, w01, w10, w11))
    flatmap = data.reshape(data.shape[0], -1)
    out = (
        flatmap[:, i00] * w00
        + flatmap[:, i01] * w01
        + flatmap[:, i10] * w10
        + flatmap[:, i11] * w11
    )
    cache = BilinearCache(data.shape, i00, i01, i10, i11, (w00, w01, w10, w11))
    return out, cache


def bilinear_sample_backward(grad_out: np.ndarray, cache: BilinearCache) -> np.ndarray:
    """Distribute (C, n) gradients onto the four corner pixels of each sample."""
    c, h, w = cache.shape
    grad_flat = np.zeros((c, h * w), dtype=np.result_type(grad_out.dtype, np.float32))
    w00, w01, w10, w11 = cache.weights
    np.add.at(grad_flat.T, cache.idx00, (grad_out * w00).T)
    np.add.at(grad_flat.T, cache.idx01, (grad_out * w01).T)
    np.add.at(grad_flat.T, cache.idx10, (grad_out * w10).T)
    np.add.at(grad_flat.T, cache.idx11, (grad_out * w11).T)
    return grad_flat.reshape(c, h, w)


# --- checkpointing -------------------------------------------------------------


def _as_archive(arr: np.ndarray) -> FeatureMap:
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 1:
        a = a.reshape(1, 1, -1)
    elif a.ndim == 2:
        a = a.reshape(1, *a.shape)
    return FeatureMap(a)


def save_head_params(params: HeadParams, out_dir, prefix: str = "head") -> dict:
    """Write one DFA1 archive per tensor plus descriptor metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in params.tensors().items():
        fname = f"{prefix}_{name}.dfa"
        write_feature_archive(_as_archive(arr), out_dir / fname)
        files[name] = {"file": fname, "shape": list(arr.shape)}
    return {
        "in_channels": params.in_channels,
        "code_dim": params.code_dim,
        "tensors": files,
    }


def load_head_params(out_dir, descriptor: dict) -> HeadParams:
    out_dir = Path(out_dir)
    tensors = {}
    for name, meta in descriptor["tensors"].items():
        arr = read_feature_archive(out_dir / meta["file"]).data
        tensors[name] = arr.reshape(meta["shape"])
    return HeadParams(**tensors)


def save_descriptor(path, descriptor: dict) -> None:
    Path(path).write_text(json.dumps(descriptor, indent=2) + "\n")


def load_descriptor(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"cannot read checkpoint descriptor {path}: {exc}") from exc
