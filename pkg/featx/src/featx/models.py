"""Backbone registry.

Every backbone is wrapped in the same tiny protocol: ``grid_stride`` (the
input-pixels-per-feature factor) and ``extract`` mapping a normalized
image batch to final-layer spatial features (B, C, H/stride, W/stride).

``dino-vit-s``/``dino-vit-b`` are the patch-8 self-distilled transformers
(teacher weights) fetched through torch.hub; ``resnet50`` and ``mocov2``
are stride-32 CNNs, the latter from a local checkpoint. ``random-vit`` is
a small deterministic randomly initialized transformer: no downloads, for
exercising the export pipeline offline. Spatial tokens come from the
final block (attention Q/K/V tensors are deliberately not used).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MODEL_NAMES = ("dino-vit-s", "dino-vit-b", "mocov2", "resnet50", "random-vit")


def to_input_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> normalized (1, 3, H, W) float tensor."""
    x = torch.from_numpy(np.array(img, dtype=np.float32, copy=True)) / 255.0
    x = (x - torch.tensor(IMAGENET_MEAN)) / torch.tensor(IMAGENET_STD)
    return x.permute(2, 0, 1).unsqueeze(0)


def _sincos_grid(dim: int, grid_h: int, grid_w: int) -> torch.Tensor:
    """Fixed 2-d sin-cos positional embeddings, (grid_h * grid_w, dim)."""
    def axis(dim_half, positions):
        omega = torch.arange(dim_half // 2, dtype=torch.float32) / (dim_half / 2.0)
        omega = 1.0 / (10000.0**omega)
        out = positions.float().reshape(-1, 1) * omega.reshape(1, -1)
        return torch.cat([torch.sin(out), torch.cos(out)], dim=1)

    ys, xs = torch.meshgrid(torch.arange(grid_h), torch.arange(grid_w), indexing="ij")
    return torch.cat([axis(dim // 2, ys.reshape(-1)), axis(dim // 2, xs.reshape(-1))], dim=1)


class RandomPatchTransformer(nn.Module):
    """Deterministic randomly initialized patch transformer (no pretraining)."""

    def __init__(self, patch: int = 8, dim: int = 64, depth: int = 2, heads: int = 4, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.patch = patch
        self.dim = dim
        self.embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        layer = nn.TransformerEncoderLayer(
            d_model=dim, nhead=heads, dim_feedforward=2 * dim,
            dropout=0.0, batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.eval()

    @torch.no_grad()
    def forward_spatial(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.embed(x)  # (B, D, Hg, Wg)
        b, d, gh, gw = tokens.shape
        seq = tokens.flatten(2).transpose(1, 2)  # (B, N, D)
        seq = seq + _sincos_grid(d, gh, gw).to(seq.dtype)
        out = self.norm(self.encoder(seq))
        return out.transpose(1, 2).reshape(b, d, gh, gw)


@dataclass
class Backbone:
    name: str
    grid_stride: int
    embed_dim: int
    _extract: callable

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self._extract(x)


def _dino_backbone(hub_name: str, patch: int) -> Backbone:
    model = torch.hub.load("facebookresearch/dino:main", hub_name)
    model.eval()

    def extract(x):
        tokens = model.get_intermediate_layers(x, n=1)[0]  # (B, 1+N, C)
        b, n1, c = tokens.shape
        gh = x.shape[2] // patch
        gw = x.shape[3] // patch
        return tokens[:, 1:, :].transpose(1, 2).reshape(b, c, gh, gw)

    return Backbone(hub_name, patch, model.embed_dim, extract)


def _resnet_backbone(name: str, checkpoint_path=None) -> Backbone:
    from torchvision import models as tvm

    if checkpoint_path is None and name == "resnet50":
        net = tvm.resnet50(weights=tvm.ResNet50_Weights.IMAGENET1K_V2)
    else:
        net = tvm.resnet50(weights=None)
        if checkpoint_path is None:
            raise FileNotFoundError(f"{name} needs --checkpoint (no packaged weights)")
        state = torch.load(checkpoint_path, map_location="cpu")
        state = state.get("state_dict", state)
        cleaned = {}
        for key, value in state.items():
            key = key.removeprefix("module.").removeprefix("encoder_q.")
            if not key.startswith("fc."):
                cleaned[key] = value
        net.load_state_dict(cleaned, strict=False)
    net.eval()
    trunk = nn.Sequential(*list(net.children())[:-2])  # up to layer4

    def extract(x):
        return trunk(x)

    return Backbone(name, 32, 2048, extract)


def load_backbone(name: str, checkpoint_path=None, seed: int = 0) -> Backbone:
    if name == "dino-vit-s":
        return _dino_backbone("dino_vits8", patch=8)
    if name == "dino-vit-b":
        return _dino_backbone("dino_vitb8", patch=8)
    if name in ("resnet50", "mocov2"):
        return _resnet_backbone(name, checkpoint_path)
    if name == "random-vit":
        model = RandomPatchTransformer(seed=seed)
        return Backbone("random-vit", model.patch, model.dim, model.forward_spatial)
    raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
