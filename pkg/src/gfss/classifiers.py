"""Classifier heads over decomposed sub-features, weight statistics and calibration."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from gfss.errors import ConfigurationError, DegenerateColumnWarning, ShapeError

SIGMA_EPS = 1e-8


def score(sub_features: torch.Tensor, residual: torch.Tensor, class_weights: torch.Tensor,
          background_weight: torch.Tensor) -> torch.Tensor:
    """Per-class logits from each class's own sub-feature.

    sub_features: (B, C, d, h, w) ordered base then novel; residual: (B, d, h, w);
    class_weights: (d, C) with column i scoring sub-feature i; background_weight: (d, 1)
    scoring the residual. Returns (B, 1 + C, h, w) with background in channel 0.
    No bias terms.
    """
    if sub_features.shape[1] != class_weights.shape[1]:
        raise ShapeError(
            f"{sub_features.shape[1]} sub-features but {class_weights.shape[1]} classifier columns"
        )
    if sub_features.shape[2] != class_weights.shape[0] or background_weight.shape != (class_weights.shape[0], 1):
        raise ShapeError("classifier dim does not match feature dim")
    fg = torch.einsum("bcdhw,dc->bchw", sub_features, class_weights)
    bg = torch.einsum("bdhw,d->bhw", residual, background_weight[:, 0]).unsqueeze(1)
    return torch.cat([bg, fg], dim=1)


def combine_probabilities(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """One softmax across background, base and novel channels."""
    return torch.softmax(logits, dim=dim)


@dataclass(frozen=True)
class WeightStats:
    mu: torch.Tensor
    sigma: torch.Tensor
    mu_bar: float
    sigma_bar: float

    def rows(self, class_ids=None):
        ids = class_ids if class_ids is not None else range(1, len(self.mu) + 1)
        return [(int(c), float(m), float(s)) for c, m, s in zip(ids, self.mu, self.sigma)]


def weight_stats(weights: torch.Tensor) -> WeightStats:
    """Channel-wise mean and population std of every column of a (d, C) weight matrix."""
    if weights.ndim != 2 or weights.shape[0] < 2:
        raise ShapeError("weight matrix must be (d, C) with d >= 2")
    w = weights.detach()
    mu = w.mean(dim=0)
    sigma = w.std(dim=0, unbiased=False)
    return WeightStats(mu, sigma, float(mu.mean()), float(sigma.mean()))


def _calibrate(weights, target_mu, target_sigma, sigma_mode, order):
    stats = weight_stats(weights)
    w = weights.detach().clone()
    ok = stats.sigma > SIGMA_EPS
    if not bool(ok.all()):
        bad = torch.nonzero(~ok).flatten().tolist()
        warnings.warn(f"classifier columns {bad} have zero spread; left uncalibrated", DegenerateColumnWarning)
    if sigma_mode == "per_class":
        ratio = target_sigma / stats.sigma.clamp_min(SIGMA_EPS)
    elif sigma_mode == "mean":
        ratio = torch.full_like(stats.sigma, target_sigma / max(stats.sigma_bar, SIGMA_EPS))
    else:
        raise ConfigurationError(f"unknown sigma mode {sigma_mode!r}")
    if order == "literal":
        # shift every entry by the class-averaged mean, then rescale each column
        out = (w - stats.mu_bar + target_mu) * ratio
    elif order == "scale_then_shift":
        out = stats.mu + (w - stats.mu) * ratio - stats.mu_bar + target_mu
    else:
        raise ConfigurationError(f"unknown calibration order {order!r}")
    return torch.where(ok, out, w)


def calibrate_novel(novel_weights: torch.Tensor, base_stats: WeightStats,
                    sigma_mode: str = "per_class", order: str = "literal") -> torch.Tensor:
    """Align the novel classifier's weight distribution with the base classifier's.

    Shift by ``base_stats.mu_bar - mu_bar_novel`` then scale column i by
    ``base_stats.sigma_bar / sigma_i``. Returns a new (d, N) tensor.
    """
    return _calibrate(novel_weights, base_stats.mu_bar, base_stats.sigma_bar, sigma_mode, order)


def calibrate_both_variant(base_weights: torch.Tensor, novel_weights: torch.Tensor,
                           sigma_mode: str = "per_class", order: str = "literal"):
    """Pull both classifiers towards the pooled averages of their statistics."""
    sb, sn = weight_stats(base_weights), weight_stats(novel_weights)
    mu = 0.5 * (sb.mu_bar + sn.mu_bar)
    sigma = 0.5 * (sb.sigma_bar + sn.sigma_bar)
    return (_calibrate(base_weights, mu, sigma, sigma_mode, order),
            _calibrate(novel_weights, mu, sigma, sigma_mode, order))
