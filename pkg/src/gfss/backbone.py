"""Dense feature extractors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from gfss.errors import ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (32, 64, 64)
    dim: int = 32
    stride: int = 4
    groups: int = 4
    final_activation: bool = True

    def __post_init__(self):
        if self.dim < 2:
            raise ShapeError("feature dim must be >= 2")
        if self.stride not in (1, 2, 4, 8):
            raise ShapeError("stride must be a power of two <= 8")


def _block(cin, cout, stride, groups, activation=True):
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.GroupNorm(math.gcd(groups, cout), cout)]
    if activation:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class ToyBackbone(nn.Module):
    """Four conv->GroupNorm->ReLU blocks; the first log2(stride) blocks downsample.

    GroupNorm keeps the forward pass batch-independent, so train and eval
    mode coincide and frozen copies never drift.
    """

    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        n_down = int(np.log2(config.stride))
        widths = list(config.widths) + [config.dim]
        blocks, cin = [], 3
        for i, cout in enumerate(widths):
            last = i == len(widths) - 1
            blocks.append(_block(cin, cout, 2 if i < n_down else 1, config.groups,
                                 activation=config.final_activation or not last))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.stride = config.stride
        self.dim = config.dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.blocks(images)


class FunctionBackbone(nn.Module):
    """Adapter for an external extractor ``images (B,3,H,W) -> features (B,d,H/s,W/s)``.

    Lets pretrained networks stand in for :class:`ToyBackbone`; the wrapped
    callable owns its own parameters.
    """

    def __init__(self, fn: Callable[[torch.Tensor], torch.Tensor], dim: int, stride: int):
        super().__init__()
        self.fn = fn
        self.dim = dim
        self.stride = stride

    def forward(self, images):
        return self.fn(images)


def as_image_batch(image) -> torch.Tensor:
    """Accept an HxWx3 / BxHxWx3 numpy array or a (B,)3xHxW tensor."""
    if isinstance(image, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(image))
        t = t.unsqueeze(0) if t.ndim == 3 else t
        return t.permute(0, 3, 1, 2)
    return image.unsqueeze(0) if image.ndim == 3 else image


def extract_features(image, backbone: nn.Module) -> torch.Tensor:
    """Feature map (B, d, ceil(H/stride), ceil(W/stride)) of an image or image batch."""
    x = as_image_batch(image)
    param = next(backbone.parameters(), None)
    if param is not None:
        x = x.to(param.dtype)
    h, w = x.shape[-2:]
    s = backbone.stride
    if h < s or w < s:
        raise ShapeError(f"image {h}x{w} is smaller than the backbone stride {s}")
    feats = backbone(x)
    if feats.shape[1] != backbone.dim or feats.shape[-2:] != (-(-h // s), -(-w // s)):
        raise ShapeError(f"backbone produced {tuple(feats.shape)}, expected d={backbone.dim}, stride {s}")
    return feats
