"""Confusion-matrix metrics, base/novel mIoU, Mean, H-Mean and fold aggregation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from gfss import IGNORE_ID
from gfss.data import ClassTaxonomy, Sample
from gfss.errors import DataError

log = logging.getLogger(__name__)


def new_confusion(num_channels: int) -> np.ndarray:
    return np.zeros((num_channels, num_channels), dtype=np.int64)


def accumulate_confusion(pred: np.ndarray, target: np.ndarray, cm: np.ndarray) -> np.ndarray:
    """Add per-pixel (truth, prediction) counts; IGNORE_ID pixels are skipped.

    Both arrays hold channel indices (0 background, then base, then novel).
    """
    pred = np.asarray(pred).ravel()
    target = np.asarray(target).ravel()
    if pred.shape != target.shape:
        raise DataError("prediction and target sizes differ")
    keep = target != IGNORE_ID
    pred, target = pred[keep].astype(np.int64), target[keep].astype(np.int64)
    c = cm.shape[0]
    if target.size and (target.min() < 0 or target.max() >= c or pred.min() < 0 or pred.max() >= c):
        raise DataError(f"class index outside [0, {c})")
    cm += np.bincount(target * c + pred, minlength=c * c).reshape(c, c)
    return cm


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """IoU per channel; NaN for classes absent from both truth and prediction."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def harmonic_mean(base: float, novel: float) -> float:
    if base + novel == 0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


def weighted_mean(base: float, novel: float, num_base: int, num_novel: int,
                  background_in_base: bool = True) -> float:
    """Class-count weighted mean of the two group mIoUs."""
    nb = num_base + (1 if background_in_base else 0)
    return (nb * base + num_novel * novel) / (nb + num_novel)


@dataclass
class MetricsReport:
    iou_per_class: list[float]
    miou_base: float
    miou_novel: float
    mean_metric: float
    h_mean: float
    fold_index: int | None = None
    num_base: int = 0
    num_novel: int = 0
    background_in_base: bool = True

    @classmethod
    def from_group_means(cls, miou_base, miou_novel, num_base, num_novel, background_in_base=True,
                         fold_index=None, iou=None) -> "MetricsReport":
        return cls(
            iou_per_class=list(iou or []),
            miou_base=miou_base,
            miou_novel=miou_novel,
            mean_metric=weighted_mean(miou_base, miou_novel, num_base, num_novel, background_in_base),
            h_mean=harmonic_mean(miou_base, miou_novel),
            fold_index=fold_index,
            num_base=num_base,
            num_novel=num_novel,
            background_in_base=background_in_base,
        )

    def summary_row(self) -> dict:
        return {
            "fold": "mean" if self.fold_index is None else self.fold_index,
            "base": round(self.miou_base, 2),
            "novel": round(self.miou_novel, 2),
            "mean": round(self.mean_metric, 2),
            "h_mean": round(self.h_mean, 2),
        }

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(cm: np.ndarray, taxonomy: ClassTaxonomy, background_in_base: bool = True,
                    fold_index: int | None = None) -> MetricsReport:
    """Percent IoU per class and the base/novel/Mean/H-Mean summary.

    Classes that appear in neither truth nor prediction do not enter the averages.
    """
    if cm.sum() == 0:
        raise DataError("confusion matrix is empty")
    m, n = taxonomy.num_base, taxonomy.num_novel
    if cm.shape != (1 + m + n, 1 + m + n):
        raise DataError(f"confusion matrix {cm.shape} does not match taxonomy with {1 + m + n} channels")
    iou = iou_per_class(cm) * 100.0
    base_idx = ([0] if background_in_base else []) + list(range(1, 1 + m))
    novel_idx = list(range(1 + m, 1 + m + n))

    def group(idx):
        vals = iou[idx]
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if vals.size else 0.0

    return MetricsReport.from_group_means(group(base_idx), group(novel_idx), m, n, background_in_base,
                                          fold_index, [float(v) for v in iou])


@torch.no_grad()
def confusion_for_model(model, samples: Sequence[Sample], taxonomy: ClassTaxonomy, batch_size: int = 16) -> np.ndarray:
    cm = new_confusion(model.num_channels)
    model.eval()
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk])).permute(0, 3, 1, 2).contiguous()
        images = images.to(model.prototypes_base.dtype)
        pred = model.predict(images).numpy()
        target = np.stack([taxonomy.to_channels(s.mask, include_novel=model.num_novel > 0) for s in chunk])
        accumulate_confusion(pred, target, cm)
    return cm


def evaluate_model(model, samples: Sequence[Sample], taxonomy: ClassTaxonomy, background_in_base: bool = True,
                   fold_index: int | None = None) -> MetricsReport:
    return compute_metrics(confusion_for_model(model, samples, taxonomy), taxonomy, background_in_base, fold_index)


def evaluate_predictor(predict: Callable[[Sample], np.ndarray], samples: Sequence[Sample],
                       taxonomy: ClassTaxonomy, background_in_base: bool = True) -> MetricsReport:
    """Score any function mapping a sample to an (H, W) array of global class ids."""
    table = taxonomy.label_table(include_novel=True)
    cm = new_confusion(1 + taxonomy.num_base + taxonomy.num_novel)
    for s in samples:
        pred = table[np.asarray(predict(s))]
        accumulate_confusion(pred, taxonomy.to_channels(s.mask), cm)
    return compute_metrics(cm, taxonomy, background_in_base)


@dataclass
class CrossValidationReport:
    folds: list[MetricsReport]
    aggregate: MetricsReport | None
    failures: list[dict] = field(default_factory=list)

    def rows(self) -> list[dict]:
        rows = [f.summary_row() for f in self.folds]
        if self.aggregate is not None:
            rows.append(self.aggregate.summary_row())
        return rows


def aggregate_folds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Average base and novel mIoU over folds, then derive Mean and H-Mean from the averages."""
    base = float(np.mean([r.miou_base for r in reports]))
    novel = float(np.mean([r.miou_novel for r in reports]))
    first = reports[0]
    return MetricsReport.from_group_means(base, novel, first.num_base, first.num_novel, first.background_in_base)


def cross_validate(run_fn: Callable[[int, object], MetricsReport], num_folds: int, config=None) -> CrossValidationReport:
    """Run ``run_fn(fold, config)`` for every fold; failed folds are recorded, not fatal."""
    reports, failures = [], []
    for fold in range(num_folds):
        try:
            report = run_fn(fold, config)
            report.fold_index = fold
            reports.append(report)
        except Exception as exc:  # noqa: BLE001 - a failing fold must not lose the others
            log.exception("fold %d failed", fold)
            failures.append({"fold": fold, "error": f"{type(exc).__name__}: {exc}"})
    return CrossValidationReport(reports, aggregate_folds(reports) if reports else None, failures)


REPORT_COLUMNS = ("fold", "base", "novel", "mean", "h_mean")


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.2f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def report_table(rows: Sequence[dict]) -> str:
    lines = [f"{'Fold':<6}{'Base':>8}{'Novel':>8}{'Mean':>8}{'H-Mean':>8}"]
    for r in rows:
        lines.append(f"{str(r['fold']):<6}{r['base']:>8.2f}{r['novel']:>8.2f}{r['mean']:>8.2f}{r['h_mean']:>8.2f}")
    return "\n".join(lines)
