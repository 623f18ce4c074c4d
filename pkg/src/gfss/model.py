"""Segmentation network: backbone, prototype decomposer and the base/novel/background heads."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from gfss.backbone import BackboneConfig, ToyBackbone
from gfss.classifiers import score
from gfss.errors import ShapeError
from gfss.prototypes import NovelPrototypeModulation, decompose, init_prototypes

# parameter attribute -> checkpoint tensor name
_RENAMES = {
    "prototypes_base": "prototypes.base",
    "prototypes_novel": "prototypes.novel",
    "clf_base": "clf.base",
    "clf_novel": "clf.novel",
    "clf_background": "clf.background",
    "aux_background": "aux.background",
}
_INVERSE = {v: k for k, v in _RENAMES.items()}


def _init_classifier(dim, num, generator):
    return torch.randn(dim, num, generator=generator) / math.sqrt(dim)


class GFSSModel(nn.Module):
    """Channel layout of the logits: 0 background, 1..M base, M+1..M+N novel."""

    def __init__(self, num_base: int, backbone_config: BackboneConfig = BackboneConfig(),
                 generator: torch.Generator | None = None, learned_aux_background: bool = False):
        super().__init__()
        self.backbone = ToyBackbone(backbone_config)
        d = backbone_config.dim
        self.dim = d
        self.num_base = num_base
        self.prototypes_base = nn.Parameter(init_prototypes(num_base, d, generator))
        self.clf_base = nn.Parameter(_init_classifier(d, num_base, generator))
        self.clf_background = nn.Parameter(_init_classifier(d, 1, generator))
        self.aux_background = nn.Parameter(torch.zeros(())) if learned_aux_background else None
        self.prototypes_novel = None
        self.clf_novel = None
        self.npm = None
        self.npm_mode = "off"

    @property
    def num_novel(self) -> int:
        return 0 if self.prototypes_novel is None else self.prototypes_novel.shape[0]

    @property
    def num_channels(self) -> int:
        return 1 + self.num_base + self.num_novel

    def add_novel_classes(self, num_novel: int, npm_mode: str = "off", generator: torch.Generator | None = None,
                          npm_generator: torch.Generator | None = None, npm_scale: bool = False,
                          npm_fusion_bias: bool = True):
        d = self.dim
        dtype = self.prototypes_base.dtype
        self.prototypes_novel = nn.Parameter(init_prototypes(num_novel, d, generator).to(dtype))
        self.clf_novel = nn.Parameter(_init_classifier(d, num_novel, generator).to(dtype))
        self.npm_mode = npm_mode
        if npm_mode != "off":
            self.npm = NovelPrototypeModulation(d, similarity=npm_mode, scale=npm_scale,
                                                fusion_bias=npm_fusion_bias, generator=npm_generator).to(dtype)

    def freeze_pretrained(self):
        for p in [*self.backbone.parameters(), self.prototypes_base, self.clf_base, self.clf_background]:
            p.requires_grad_(False)
        if self.aux_background is not None:
            self.aux_background.requires_grad_(False)

    def novel_prototypes(self) -> torch.Tensor:
        """U_n, or its modulated version when NPM is enabled (recomputed every call)."""
        if self.npm is None:
            return self.prototypes_novel
        return self.npm(self.prototypes_novel, self.prototypes_base.detach())

    def all_prototypes(self) -> torch.Tensor:
        if self.prototypes_novel is None:
            return self.prototypes_base
        return torch.cat([self.prototypes_base, self.novel_prototypes()], dim=0)

    def class_weights(self) -> torch.Tensor:
        if self.clf_novel is None:
            return self.clf_base
        return torch.cat([self.clf_base, self.clf_novel], dim=1)

    def head(self, features: torch.Tensor, prototypes: torch.Tensor | None = None) -> torch.Tensor:
        prototypes = self.all_prototypes() if prototypes is None else prototypes
        sub, residual = decompose(features, prototypes)
        return score(sub, residual, self.class_weights(), self.clf_background)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Logits at feature resolution, (B, 1+M+N, H/stride, W/stride)."""
        return self.head(self.features(images))

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        """Per-pixel argmax at input resolution; ties go to the lowest channel."""
        logits = upsample(self(images), images.shape[-2:])
        return logits.argmax(dim=1)

    # -- named tensors for checkpoints ---------------------------------------------

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for key, value in self.state_dict().items():
            out[_RENAMES.get(key, key)] = value.detach().clone()
        return out

    def load_named_tensors(self, tensors: dict[str, torch.Tensor], strict: bool = True):
        own = self.state_dict()
        state = {}
        for name, value in tensors.items():
            key = _INVERSE.get(name, name)
            if key not in own:
                if strict:
                    raise ShapeError(f"unexpected tensor {name!r} for this model")
                continue
            if tuple(own[key].shape) != tuple(value.shape):
                raise ShapeError(f"tensor {name!r} has shape {tuple(value.shape)}, model expects {tuple(own[key].shape)}")
            state[key] = value
        missing = set(own) - set(state)
        if strict and missing:
            raise ShapeError(f"missing tensors {sorted(_RENAMES.get(k, k) for k in missing)}")
        self.load_state_dict(state, strict=False)


def upsample(logits: torch.Tensor, size) -> torch.Tensor:
    if tuple(logits.shape[-2:]) == tuple(size):
        return logits
    return F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)


def downsample_labels(labels: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbour resize of (B, H, W) integer labels."""
    return F.interpolate(labels[:, None].float(), size=tuple(size), mode="nearest")[:, 0].long()
