"""Confusion-matrix segmentation metrics and the cross-domain mIoU ratio."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Optional

import numpy as np
import torch

from .errors import ContractViolation, DegenerateInputError


class ConfusionMatrix:
    """K x K pixel counts; ``counts[g, p]`` = pixels with ground truth g predicted as p."""

    def __init__(self, num_classes: int, ignore_index: Optional[int] = None):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self):
        cm = ConfusionMatrix(self.num_classes, self.ignore_index)
        cm.counts = self.counts.copy()
        return cm

    def update(self, predictions, labels):
        pred = np.asarray(predictions).ravel().astype(np.int64)
        gt = np.asarray(labels).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ContractViolation(f"prediction/label size mismatch: {pred.shape} vs {gt.shape}")
        if self.ignore_index is not None:
            keep = gt != self.ignore_index
            pred, gt = pred[keep], gt[keep]
        k = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= k or gt.min() < 0 or gt.max() >= k):
            raise ContractViolation(f"class index outside [0, {k})")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return merge_confusion(self, other)

    def per_class_iou(self):
        return per_class_iou(self)

    def miou(self) -> float:
        return mean_iou(per_class_iou(self))


def update_confusion(cm: ConfusionMatrix, predictions, labels) -> ConfusionMatrix:
    return cm.update(predictions, labels)


def merge_confusion(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.num_classes != b.num_classes:
        raise ContractViolation(f"cannot merge {a.num_classes}-class and {b.num_classes}-class matrices")
    out = ConfusionMatrix(a.num_classes, a.ignore_index)
    out.counts = a.counts + b.counts
    return out


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN marks classes absent from both ground truth and prediction."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    iou = np.full(cm.num_classes, np.nan)
    defined = denom > 0
    iou[defined] = tp[defined] / denom[defined]
    return iou


def mean_iou(iou) -> float:
    iou = np.asarray(iou, dtype=np.float64)
    defined = ~np.isnan(iou)
    return float(iou[defined].mean()) if defined.any() else float("nan")


def round2(x: float) -> float:
    """Round to 2 decimals, half-to-even on the decimal representation."""
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def miou_percent(source_miou: float, target_miou: float) -> float:
    """100 * target / source, rounded to 2 decimals."""
    if not source_miou > 0:
        raise DegenerateInputError("source mIoU must be positive")
    return round2(100.0 * target_miou / source_miou)


@dataclass
class MetricsReport:
    per_class_iou: list
    miou: float
    pixels: int
    source_miou: Optional[float] = None
    target_miou: Optional[float] = None
    miou_percent: Optional[float] = None
    source: Optional[dict] = None
    target: Optional[dict] = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_cm(cls, cm: ConfusionMatrix):
        iou = per_class_iou(cm)
        return cls(per_class_iou=[None if np.isnan(v) else float(v) for v in iou],
                   miou=mean_iou(iou), pixels=cm.total)


def cross_domain_report(source_cm: ConfusionMatrix, target_cm: ConfusionMatrix) -> MetricsReport:
    src = MetricsReport.from_cm(source_cm)
    tgt = MetricsReport.from_cm(target_cm)
    return MetricsReport(
        per_class_iou=tgt.per_class_iou,
        miou=tgt.miou,
        pixels=tgt.pixels,
        source_miou=src.miou,
        target_miou=tgt.miou,
        miou_percent=miou_percent(src.miou, tgt.miou),
        source=src.to_dict(),
        target=tgt.to_dict(),
    )


@torch.no_grad()
def predict(model, images: torch.Tensor, w: Optional[torch.Tensor] = None) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        return model(images, w).argmax(dim=1)
    finally:
        model.train(was_training)


def confusion_for_dataset(model, dataset, embedder=None, embeddings=None, batch_size: int = 16) -> ConfusionMatrix:
    """Accumulate one confusion matrix over ``dataset``.

    Domain embeddings come from ``embeddings`` (one row per scene) if given,
    otherwise from ``embedder`` when the model needs them.
    """
    from .model import images_to_tensor

    if not len(dataset):
        raise ContractViolation("dataset is empty")
    cm = ConfusionMatrix(model.num_classes)
    needs_w = model.requires_domain_embedding
    if needs_w and embeddings is None:
        if embedder is None:
            raise ContractViolation("model requires domain embeddings but no embedder was given")
        embeddings = embedder.embed_many([s.image for s in dataset])
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        x = images_to_tensor([s.image for s in chunk])
        w = None
        if needs_w:
            w = torch.as_tensor(np.asarray(embeddings[start:start + batch_size]), dtype=torch.float32)
        pred = predict(model, x, w).numpy()
        for p, s in zip(pred, chunk):
            cm.update(p, s.labels)
    return cm


def evaluate_dataset(model, dataset, catalog=None, enc=None, temperature: float = 1.0,
                     batch_size: int = 16) -> MetricsReport:
    embedder = None
    if model.requires_domain_embedding:
        from .domain_embedding import DomainEmbedder

        if catalog is None or enc is None:
            raise ContractViolation("model requires domain embeddings: pass catalog and enc")
        embedder = DomainEmbedder(catalog, enc, temperature)
    return MetricsReport.from_cm(confusion_for_dataset(model, dataset, embedder, batch_size=batch_size))


def evaluate_cross_domain(model, source, target, catalog=None, enc=None, temperature: float = 1.0,
                          batch_size: int = 16) -> MetricsReport:
    embedder = None
    if model.requires_domain_embedding:
        from .domain_embedding import DomainEmbedder

        embedder = DomainEmbedder(catalog, enc, temperature)
    src = confusion_for_dataset(model, source, embedder, batch_size=batch_size)
    tgt = confusion_for_dataset(model, target, embedder, batch_size=batch_size)
    return cross_domain_report(src, tgt)
