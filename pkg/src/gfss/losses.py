"""Training losses and per-phase totals."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from gfss import IGNORE_ID
from gfss.errors import ConfigurationError, DataError

AUX_TEMPERATURE = 0.1


@dataclass
class LossBundle:
    seg: torch.Tensor
    orth: torch.Tensor
    aux: torch.Tensor | None = None
    con: torch.Tensor | None = None
    total: torch.Tensor | None = None

    def as_row(self) -> dict[str, float]:
        def f(x):
            return float("nan") if x is None else float(x.detach() if torch.is_tensor(x) else x)

        return {"seg": f(self.seg), "orth": f(self.orth), "aux": f(self.aux),
                "con": f(self.con), "total": f(self.total)}


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, ignore_index: int = IGNORE_ID) -> torch.Tensor:
    """Pixel-averaged cross-entropy of (B, C, H, W) logits against (B, H, W) labels."""
    valid = target != ignore_index
    if not bool(valid.any()):
        raise DataError("every pixel is ignored; segmentation loss is undefined")
    return F.cross_entropy(logits, target, ignore_index=ignore_index)


def auxiliary_logits(features: torch.Tensor, base_prototypes: torch.Tensor, tau: float = AUX_TEMPERATURE,
                     background_score: torch.Tensor | float = 0.0) -> torch.Tensor:
    """cos(f(x), u_i)/tau for each base prototype, plus a background score in channel 0."""
    f = F.normalize(features, dim=1, eps=1e-12)
    u = F.normalize(base_prototypes, dim=1, eps=1e-12)
    sims = torch.einsum("bdhw,md->bmhw", f, u) / tau
    bg = torch.zeros_like(sims[:, :1]) + background_score
    return torch.cat([bg, sims], dim=1)


def auxiliary_loss(features: torch.Tensor, base_prototypes: torch.Tensor, target: torch.Tensor,
                   tau: float = AUX_TEMPERATURE, background_score: torch.Tensor | float = 0.0) -> torch.Tensor:
    """Base prototypes used as a cosine classifier on the feature grid.

    ``target`` holds channel labels already resized to the feature grid.
    """
    logits = auxiliary_logits(features, base_prototypes, tau, background_score)
    return segmentation_loss(logits, target)


def consistency_loss(weak_probs: torch.Tensor, strong_logits: torch.Tensor, stop_gradient: bool = True,
                     dim: int = 1) -> torch.Tensor:
    """Soft cross-entropy -sum_c p_w(c) log p_s(c), averaged over every pixel.

    The strong branch enters as logits (log-probabilities are also valid
    logits). The weak probabilities are a constant target by default.
    """
    target = weak_probs.detach() if stop_gradient else weak_probs
    per_pixel = -(target * F.log_softmax(strong_logits, dim=dim)).sum(dim=dim)
    return per_pixel.mean()


def entropy(probs: torch.Tensor, dim: int = 1) -> torch.Tensor:
    return -(probs * torch.log(probs.clamp_min(1e-30))).sum(dim=dim)


PHASE_COMPONENTS = {"pretrain": ("seg", "orth", "aux"), "finetune": ("seg", "orth", "con")}


def total_loss(components: dict, phase: str) -> LossBundle:
    """Unit-weighted sum of the components that belong to ``phase``."""
    if phase not in PHASE_COMPONENTS:
        raise ConfigurationError(f"unknown phase {phase!r}")
    wanted = PHASE_COMPONENTS[phase]
    extra = {k for k, v in components.items() if v is not None} - set(wanted)
    if extra:
        raise ConfigurationError(f"components {sorted(extra)} do not belong to phase {phase}")
    missing = [k for k in wanted if components.get(k) is None]
    if missing:
        raise ConfigurationError(f"phase {phase} requires components {missing}")
    total = sum(components[k] for k in wanted)
    return LossBundle(total=total, **{k: components[k] for k in wanted})
