"""Two-phase training: base pre-training, then novel fine-tuning with NPM, NCC and CCL."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from gfss.augmentation import CUTOUT_MODES, randaugment_variant, strong_augment, weak_augment
from gfss.backbone import BackboneConfig
from gfss.checkpoint import Checkpoint
from gfss.classifiers import calibrate_both_variant, calibrate_novel, weight_stats
from gfss.data import ClassTaxonomy, Sample
from gfss.errors import ConfigurationError, DataError, LineageError, TrainingDivergenceError
from gfss.losses import (
    auxiliary_loss,
    consistency_loss,
    segmentation_loss,
    total_loss,
)
from gfss.model import GFSSModel, downsample_labels, upsample
from gfss.prototypes import orthogonality_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "phase", "epoch", "seg", "orth", "aux", "con", "total")

_CHOICES = {
    "npm": ("attention", "cosine", "off"),
    "ncc": ("ncc", "nbcc", "off"),
    "ncc_sigma": ("per_class", "mean"),
    "ncc_order": ("literal", "scale_then_shift"),
    "ccl": ("unlabeled", "labeled", "off"),
    "strong_aug": ("cutout", "randaugment"),
    "cutout_mode": CUTOUT_MODES,
    "ccl_source": ("base", "novel", "both"),
    "ccl_classifiers": ("both", "base", "novel"),
    "lr_schedule_pretrain": ("poly", "constant"),
    "lr_schedule_finetune": ("poly", "constant"),
    "aux_background": ("fixed", "learned"),
    "optimizer": ("sgd", "adam"),
    "finetune_optimizer": (None, "sgd", "adam"),
}


@dataclass
class TrainConfig:
    """Every knob of both phases; defaults follow the full-scale recipe."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    pretrain_epochs: int = 50
    finetune_epochs: int = 500
    batch_size: int = 8
    crop_size: int = 473
    seed: int = 0
    shots: int = 1
    fold: int = 0
    num_folds: int = 4
    lr_schedule_pretrain: str = "poly"
    lr_schedule_finetune: str = "constant"
    poly_power: float = 0.9
    finetune_lr: float | None = None
    optimizer: str = "sgd"
    finetune_optimizer: str | None = None
    # backbone
    backbone_widths: str = "32,64,64"
    feature_dim: int = 32
    stride: int = 4
    final_activation: bool = True
    # pre-training
    use_aux: bool = True
    aux_tau: float = 0.1
    aux_background: str = "fixed"
    # fine-tuning modules
    npm: str = "attention"
    npm_scale: bool = False
    npm_fusion_bias: bool = True
    ncc: str = "ncc"
    ncc_sigma: str = "per_class"
    ncc_order: str = "literal"
    ccl: str = "unlabeled"
    strong_aug: str = "cutout"
    cutout_mode: str = "bcutout"
    cutout_size: int = 16
    ccl_source: str = "base"
    ccl_classifiers: str = "both"
    ccl_stop_gradient: bool = True
    ccl_ratio: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigurationError(f"{key}={getattr(self, key)!r}; expected one of {allowed}")
        if self.lr <= 0 or (self.finetune_lr is not None and self.finetune_lr <= 0):
            raise ConfigurationError("learning rate must be positive")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.batch_size < 1 or self.crop_size < 1 or self.shots < 1:
            raise ConfigurationError("batch_size, crop_size and shots must be positive")
        if self.crop_size < self.stride:
            raise ConfigurationError("crop_size must be at least the stride")
        if self.ccl_ratio <= 0:
            raise ConfigurationError("ccl_ratio must be positive")

    def backbone_config(self) -> BackboneConfig:
        widths = tuple(int(w) for w in str(self.backbone_widths).split(",") if w.strip())
        return BackboneConfig(widths=widths, dim=self.feature_dim, stride=self.stride,
                              final_activation=self.final_activation)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def desk_config(**overrides) -> TrainConfig:
    """Settings for the 64x64 synthetic task on CPU.

    The toy backbone is wider and ends without a ReLU, the auxiliary loss is
    off and fine-tuning uses Adam: with one optimizer step per fine-tuning
    epoch, plain SGD at the full-scale rate barely moves the novel weights.
    """
    base = dict(pretrain_epochs=20, finetune_epochs=200, batch_size=8, crop_size=64, cutout_size=8, num_folds=2,
                feature_dim=64, final_activation=False, use_aux=False, finetune_optimizer="adam", finetune_lr=0.003)
    base.update(overrides)
    return TrainConfig(**base)


# -- seeding --------------------------------------------------------------------------

_STREAMS = ("pretrain_init", "pretrain_data", "novel_init", "npm_init", "support", "ccl")


def rng_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAMS.index(name),)))


def torch_stream(seed: int, name: str) -> torch.Generator:
    child = np.random.SeedSequence(seed, spawn_key=(_STREAMS.index(name),))
    return torch.Generator().manual_seed(int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))


# -- batching -------------------------------------------------------------------------

def to_batch(samples: Sequence[Sample], taxonomy: ClassTaxonomy, include_novel: bool):
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    labels = np.stack([taxonomy.to_channels(s.mask, include_novel) for s in samples])
    return images, torch.from_numpy(labels)


def _support_labels(labels: torch.Tensor, num_base: int, keep_base: bool) -> torch.Tensor:
    """Fine-tuning targets: base-class pixels become background unless ``keep_base``."""
    if keep_base:
        return labels
    out = labels.clone()
    out[(out >= 1) & (out <= num_base)] = 0
    return out


def make_optimizer(params, kind: str, lr: float, config: TrainConfig) -> torch.optim.Optimizer:
    """SGD with momentum, or Adam (betas at their defaults); both use ``weight_decay``."""
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)


def _lr_at(config: TrainConfig, schedule: str, base_lr: float, it: int, total: int) -> float:
    if schedule == "poly" and total > 0:
        return base_lr * (1.0 - it / total) ** config.poly_power
    return base_lr


def _write_log(rows, path):
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _finite(bundle) -> bool:
    return math.isfinite(float(bundle.total.detach()))


# -- phase 1 --------------------------------------------------------------------------

def build_model(taxonomy: ClassTaxonomy, config: TrainConfig) -> GFSSModel:
    torch.manual_seed(config.seed)
    return GFSSModel(taxonomy.num_base, config.backbone_config(), torch_stream(config.seed, "pretrain_init"),
                     learned_aux_background=config.aux_background == "learned")


def _snapshot(model, config, taxonomy, phase, epoch, parent=None, meta=None, log_rows=None) -> Checkpoint:
    return Checkpoint(
        tensors=model.named_tensors(),
        config=config.to_dict(),
        phase=phase,
        epoch=epoch,
        taxonomy=taxonomy.to_dict(),
        parent_lineage=parent,
        rng_state={"root_seed": config.seed, "streams": list(_STREAMS)},
        meta=dict(meta or {}),
        log=list(log_rows or []),
    ).seal()


def model_from_checkpoint(ckpt: Checkpoint) -> GFSSModel:
    """Rebuild the network a checkpoint was taken from and load its tensors."""
    config = TrainConfig.from_dict(ckpt.config)
    taxonomy = ClassTaxonomy.from_dict(ckpt.taxonomy)
    model = GFSSModel(taxonomy.num_base, config.backbone_config(),
                      learned_aux_background=config.aux_background == "learned")
    if ckpt.phase == "finetune":
        model.add_novel_classes(taxonomy.num_novel, npm_mode=config.npm, npm_scale=config.npm_scale,
                                npm_fusion_bias=config.npm_fusion_bias)
    model.load_named_tensors(ckpt.tensors)
    return model


def pretrain(base_samples: Sequence[Sample], taxonomy: ClassTaxonomy, config: TrainConfig,
             log_path=None, init: Checkpoint | None = None) -> Checkpoint:
    """Train backbone, base prototypes, base and background classifiers on base data.

    ``base_samples`` must already be relabeled (novel pixels as background).
    Loss: segmentation + orthogonality (+ auxiliary prototype classification).
    """
    if not base_samples:
        raise DataError("pre-training set is empty")
    if init is not None:
        init.require_phase("pretrain")
    model = build_model(taxonomy, config)
    if init is not None:
        model.load_named_tensors(init.tensors)
    rng = rng_stream(config.seed, "pretrain_data")
    opt = make_optimizer([p for p in model.parameters() if p.requires_grad], config.optimizer, config.lr, config)
    crop = (config.crop_size, config.crop_size)
    bs = config.batch_size
    steps_per_epoch = math.ceil(len(base_samples) / bs)
    total_steps = steps_per_epoch * config.pretrain_epochs
    rows, step = [], 0
    last_good = _snapshot(model, config, taxonomy, "pretrain", 0)
    for epoch in range(1, config.pretrain_epochs + 1):
        order = rng.permutation(len(base_samples))
        for lo in range(0, len(order), bs):
            batch = [weak_augment(base_samples[i], rng, crop) for i in order[lo : lo + bs]]
            images, labels = to_batch(batch, taxonomy, include_novel=False)
            feats = model.features(images)
            logits = upsample(model.head(feats), labels.shape[-2:])
            comps = {
                "seg": segmentation_loss(logits, labels),
                "orth": orthogonality_loss(model.prototypes_base),
                "aux": torch.zeros(()),
            }
            if config.use_aux:
                bg = model.aux_background if model.aux_background is not None else 0.0
                comps["aux"] = auxiliary_loss(feats, model.prototypes_base,
                                              downsample_labels(labels, feats.shape[-2:]), config.aux_tau, bg)
            bundle = total_loss(comps, "pretrain")
            step += 1
            rows.append({"step": step, "phase": "pretrain", "epoch": epoch, **bundle.as_row()})
            if not _finite(bundle):
                _write_log(rows, log_path)
                raise TrainingDivergenceError(f"non-finite loss at pre-training step {step}", last_good)
            for g in opt.param_groups:
                g["lr"] = _lr_at(config, config.lr_schedule_pretrain, config.lr, step - 1, total_steps)
            opt.zero_grad(set_to_none=True)
            bundle.total.backward()
            opt.step()
        last_good = _snapshot(model, config, taxonomy, "pretrain", epoch)
        log.info("pretrain epoch %d/%d loss %.4f", epoch, config.pretrain_epochs, rows[-1]["total"])
    _write_log(rows, log_path)
    ckpt = _snapshot(model, config, taxonomy, "pretrain", config.pretrain_epochs, log_rows=rows)
    return ckpt


# -- phase 2 --------------------------------------------------------------------------

def _channel_subset(num_base, num_novel, which):
    bg = [0]
    base = list(range(1, 1 + num_base))
    novel = list(range(1 + num_base, 1 + num_base + num_novel))
    return {"both": bg + base + novel, "base": bg + base, "novel": bg + novel}[which]


def _strong_view(weak: Sample, config: TrainConfig, rng) -> Sample:
    if config.strong_aug == "randaugment":
        return randaugment_variant(weak, rng).strong
    return strong_augment(weak, config.cutout_mode, rng, config.cutout_size).strong


def _check_lineage(ckpt: Checkpoint, taxonomy: ClassTaxonomy):
    if ckpt.phase != "pretrain":
        raise LineageError(f"fine-tuning needs a pretrain checkpoint, got phase {ckpt.phase!r}")
    if ClassTaxonomy.from_dict(ckpt.taxonomy) != taxonomy:
        raise LineageError(f"checkpoint taxonomy {ckpt.taxonomy} does not match {taxonomy.to_dict()}")


def finetune(ckpt: Checkpoint, support_set: Sequence[Sample], base_unlabeled: Sequence[Sample],
             taxonomy: ClassTaxonomy, config: TrainConfig, log_path=None, on_epoch_end=None) -> Checkpoint:
    """Train novel prototypes, novel classifier and NPM with every pre-trained module frozen.

    Each step sums the supervised loss on a support batch with the consistency
    loss on an equally sized (times ``ccl_ratio``) batch of weak/strong views.
    The novel classifier is calibrated after every epoch. ``on_epoch_end(epoch,
    model)`` runs after calibration.
    """
    _check_lineage(ckpt, taxonomy)
    if not support_set:
        raise DataError("support set is empty")
    pre_config = TrainConfig.from_dict(ckpt.config)
    if pre_config.backbone_config() != config.backbone_config():
        raise LineageError("backbone settings differ from the pre-trained checkpoint")
    model = model_from_checkpoint(ckpt)
    model.add_novel_classes(taxonomy.num_novel, npm_mode=config.npm, generator=torch_stream(config.seed, "novel_init"),
                            npm_generator=torch_stream(config.seed, "npm_init"), npm_scale=config.npm_scale,
                            npm_fusion_bias=config.npm_fusion_bias)
    model.freeze_pretrained()
    trainable = [p for p in model.parameters() if p.requires_grad]
    lr = config.finetune_lr if config.finetune_lr is not None else config.lr
    opt = make_optimizer(trainable, config.finetune_optimizer or config.optimizer, lr, config)

    support_rng = rng_stream(config.seed, "support")
    ccl_rng = rng_stream(config.seed, "ccl")
    crop = (config.crop_size, config.crop_size)
    m, n = taxonomy.num_base, taxonomy.num_novel
    keep_base = config.ccl == "labeled"
    if config.ccl_source == "base":
        ccl_pool = list(base_unlabeled)
    elif config.ccl_source == "novel":
        ccl_pool = list(support_set)
    else:
        ccl_pool = list(base_unlabeled) + list(support_set)
    if config.ccl != "off" and not ccl_pool:
        raise DataError("consistency learning is enabled but its sample pool is empty")
    subset = _channel_subset(m, n, config.ccl_classifiers)

    bs = config.batch_size
    steps_per_epoch = math.ceil(len(support_set) / bs)
    total_steps = steps_per_epoch * config.finetune_epochs
    rows, step, calibrations = [], 0, 0
    last_good = _snapshot(model, config, taxonomy, "finetune", 0, parent=ckpt.lineage_id)
    for epoch in range(1, config.finetune_epochs + 1):
        order = support_rng.permutation(len(support_set))
        for lo in range(0, len(order), bs):
            batch = [weak_augment(support_set[i], support_rng, crop) for i in order[lo : lo + bs]]
            images, labels = to_batch(batch, taxonomy, include_novel=True)
            labels = _support_labels(labels, m, keep_base)
            with torch.no_grad():
                feats = model.features(images)
            prototypes = model.all_prototypes()
            logits = upsample(model.head(feats, prototypes), labels.shape[-2:])
            seg = segmentation_loss(logits, labels)
            con = torch.zeros(())
            if config.ccl != "off":
                n_u = max(1, round(config.ccl_ratio * len(batch)))
                picks = ccl_rng.choice(len(ccl_pool), size=n_u, replace=len(ccl_pool) < n_u)
                weak = [weak_augment(ccl_pool[i], ccl_rng, crop) for i in picks]
                if config.ccl == "labeled":
                    u_images, u_labels = to_batch(weak, taxonomy, include_novel=False)
                    with torch.no_grad():
                        u_feats = model.features(u_images)
                    u_logits = upsample(model.head(u_feats, prototypes), u_labels.shape[-2:])
                    seg = seg + segmentation_loss(u_logits, u_labels)
                else:
                    strong = [_strong_view(w, config, ccl_rng) for w in weak]
                    w_images, _ = to_batch(weak, taxonomy, include_novel=True)
                    s_images, _ = to_batch(strong, taxonomy, include_novel=True)
                    with torch.no_grad():
                        w_feats = model.features(w_images)
                        s_feats = model.features(s_images)
                    size = w_images.shape[-2:]
                    if config.ccl_stop_gradient:
                        with torch.no_grad():
                            w_logits = upsample(model.head(w_feats, prototypes.detach()), size)
                    else:
                        w_logits = upsample(model.head(w_feats, prototypes), size)
                    s_logits = upsample(model.head(s_feats, prototypes), size)
                    p_w = torch.softmax(w_logits[:, subset], dim=1)
                    con = consistency_loss(p_w, s_logits[:, subset], stop_gradient=config.ccl_stop_gradient)
            bundle = total_loss({"seg": seg, "orth": orthogonality_loss(prototypes), "con": con}, "finetune")
            step += 1
            rows.append({"step": step, "phase": "finetune", "epoch": epoch, **bundle.as_row()})
            if not _finite(bundle):
                _write_log(rows, log_path)
                raise TrainingDivergenceError(f"non-finite loss at fine-tuning step {step}", last_good)
            for g in opt.param_groups:
                g["lr"] = _lr_at(config, config.lr_schedule_finetune, lr, step - 1, total_steps)
            opt.zero_grad(set_to_none=True)
            bundle.total.backward()
            opt.step()
        with torch.no_grad():
            if config.ncc == "ncc":
                model.clf_novel.copy_(calibrate_novel(model.clf_novel, weight_stats(model.clf_base),
                                                      config.ncc_sigma, config.ncc_order))
                calibrations += 1
            elif config.ncc == "nbcc":
                new_base, new_novel = calibrate_both_variant(model.clf_base, model.clf_novel,
                                                             config.ncc_sigma, config.ncc_order)
                model.clf_base.copy_(new_base)
                model.clf_novel.copy_(new_novel)
                calibrations += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
        last_good = _snapshot(model, config, taxonomy, "finetune", epoch, parent=ckpt.lineage_id,
                              meta={"ncc_calibrations": calibrations})
    _write_log(rows, log_path)
    return _snapshot(model, config, taxonomy, "finetune", config.finetune_epochs, parent=ckpt.lineage_id,
                     meta={"ncc_calibrations": calibrations}, log_rows=rows)
