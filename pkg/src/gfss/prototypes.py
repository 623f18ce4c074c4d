"""Class prototypes, the projection-based feature decomposer and novel prototype modulation."""

from __future__ import annotations

import torch
import torch.nn as nn

from gfss.errors import ConfigurationError, InvariantError, ShapeError

MIN_PROTOTYPE_NORM = 1e-8


def init_prototypes(num: int, dim: int, generator: torch.Generator | None = None, dtype=torch.float32):
    """i.i.d. standard normal rows rescaled to unit norm."""
    u = torch.randn(num, dim, generator=generator, dtype=dtype)
    return u / u.norm(dim=1, keepdim=True)


def _check_norms(prototypes: torch.Tensor) -> torch.Tensor:
    norms = prototypes.norm(dim=-1)
    if bool((norms < MIN_PROTOTYPE_NORM).any()):
        raise InvariantError("prototype with (near) zero norm")
    return norms


def unit(prototypes: torch.Tensor) -> torch.Tensor:
    return prototypes / _check_norms(prototypes).unsqueeze(-1)


def decompose(features: torch.Tensor, prototypes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split features into per-prototype projections and a residual.

    features: (B, d, h, w); prototypes: (C, d).
    Returns ``sub`` of shape (B, C, d, h, w) with
    ``sub[:, i] = <f, u_i/|u_i|> u_i/|u_i|`` per pixel, and the residual
    ``f - sub.sum(1)`` of shape (B, d, h, w).
    """
    if features.shape[1] != prototypes.shape[1]:
        raise ShapeError(f"feature dim {features.shape[1]} != prototype dim {prototypes.shape[1]}")
    u = unit(prototypes)
    coeff = torch.einsum("bdhw,cd->bchw", features, u)
    sub = coeff.unsqueeze(2) * u[None, :, :, None, None]
    residual = features - sub.sum(dim=1)
    return sub, residual


def orthogonality_loss(prototypes: torch.Tensor) -> torch.Tensor:
    """Sum of |u_i . u_j| over ordered pairs i != j."""
    if prototypes.shape[0] < 2:
        raise ShapeError("orthogonality loss needs at least two prototypes")
    gram = prototypes @ prototypes.t()
    off = gram - torch.diag_embed(torch.diagonal(gram))
    # the default subgradient of abs at 0 is 0
    return off.abs().sum()


class NovelPrototypeModulation(nn.Module):
    """Rebuilds each novel prototype as attention over base prototypes and fuses it back.

    ``similarity="attention"`` uses softmax((u W_Q)(U_b W_K)^T) weights;
    ``"cosine"`` uses softmax(cos(u, U_b) * temperature) on the raw vectors.
    The value map W_V and the concat->linear fusion are shared by both.
    """

    def __init__(
        self,
        dim: int,
        similarity: str = "attention",
        scale: bool = False,
        fusion_bias: bool = True,
        temperature: float = 1.0,
        init_noise: float = 0.01,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if similarity not in ("attention", "cosine"):
            raise ConfigurationError(f"unknown NPM similarity {similarity!r}")
        self.dim = dim
        self.similarity = similarity
        self.scale = scale
        self.temperature = temperature
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.fusion = nn.Linear(2 * dim, dim, bias=fusion_bias)
        self.reset_parameters(init_noise, generator)

    @torch.no_grad()
    def reset_parameters(self, noise: float = 0.01, generator: torch.Generator | None = None):
        """Near-identity projections and a fusion that passes ``u_i`` through."""
        eye = torch.eye(self.dim)
        for lin in (self.w_q, self.w_k, self.w_v):
            lin.weight.copy_(eye + noise * torch.randn(self.dim, self.dim, generator=generator))
        self.fusion.weight.zero_()
        self.fusion.weight[:, : self.dim] = eye
        if self.fusion.bias is not None:
            self.fusion.bias.zero_()

    def attention_weights(self, novel: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
        """(N, M) row-stochastic weights over base prototypes."""
        if base.shape[0] == 0:
            raise ConfigurationError("modulation needs at least one base prototype")
        if self.similarity == "cosine":
            scores = unit(novel) @ unit(base).t() * self.temperature
        else:
            scores = self.w_q(novel) @ self.w_k(base).t()
            if self.scale:
                scores = scores / self.dim**0.5
        return torch.softmax(scores, dim=-1)

    def reconstruct(self, novel: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
        return self.attention_weights(novel, base) @ self.w_v(base)

    def forward(self, novel: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
        if novel.shape[-1] != self.dim or base.shape[-1] != self.dim:
            raise ShapeError("prototype dims do not match the modulation layer")
        recon = self.reconstruct(novel, base)
        return self.fusion(torch.cat([novel, recon], dim=-1))


def modulate_novel_prototypes(novel, base, params: NovelPrototypeModulation):
    return params(novel, base)


def alternate_modulation_cosine(novel, base, params: NovelPrototypeModulation, temperature: float = 1.0):
    """Cosine-similarity weights in place of the Q/K projections; W_V and fusion from ``params``."""
    if base.shape[0] == 0:
        raise ConfigurationError("modulation needs at least one base prototype")
    weights = torch.softmax(unit(novel) @ unit(base).t() * temperature, dim=-1)
    recon = weights @ params.w_v(base)
    return params.fusion(torch.cat([novel, recon], dim=-1))
