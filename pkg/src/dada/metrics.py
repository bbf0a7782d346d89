"""Segmentation evaluation: per-class IoU, mIoU and the negative transfer rate.

Classes absent from both ground truth and prediction are marked undefined
and excluded from means (rather than counted as zero), which keeps small
synthetic validation sets meaningful. Argmax ties break toward the lowest
class index so reports are deterministic.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch


@dataclass
class EvalReport:
    per_class_iou: list  # per class: float in [0,1] or None when undefined
    miou: float
    miou_subset: Optional[float] = None
    per_image_miou: list = field(default_factory=list)
    negative_transfer_rate: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "miou_subset": self.miou_subset,
            "per_image_miou": self.per_image_miou,
            "negative_transfer_rate": self.negative_transfer_rate,
            "meta": self.meta,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(per_class_iou=d["per_class_iou"], miou=d["miou"],
                   miou_subset=d.get("miou_subset"),
                   per_image_miou=d.get("per_image_miou", []),
                   negative_transfer_rate=d.get("negative_transfer_rate"),
                   meta=d.get("meta", {}))


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """counts[i, j] = number of pixels with ground truth i predicted as j."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contains class indices outside [0, {num_classes})")
    flat = num_classes * gt.reshape(-1).astype(np.int64) + pred.reshape(-1).astype(np.int64)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def per_class_iou(cm: np.ndarray) -> list:
    """IoU per class; None where the class appears in neither gt nor prediction."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    out = []
    for c in range(cm.shape[0]):
        out.append(None if denom[c] == 0 else float(tp[c] / denom[c]))
    return out


def iou_report(cm: np.ndarray, subset=None) -> EvalReport:
    ious = per_class_iou(cm)
    defined = [v for v in ious if v is not None]
    miou = float(np.mean(defined)) if defined else 0.0
    miou_subset = None
    if subset is not None:
        for c in subset:
            if c >= cm.shape[0]:
                raise ValueError(f"subset class {c} out of range")
        sub = [ious[c] for c in subset if ious[c] is not None]
        miou_subset = float(np.mean(sub)) if sub else 0.0
    return EvalReport(per_class_iou=ious, miou=miou, miou_subset=miou_subset)


def negative_transfer_rate(adapted_per_image, baseline_per_image) -> float:
    """Fraction of images whose score strictly dropped after adaptation."""
    if len(adapted_per_image) != len(baseline_per_image):
        raise ValueError("per-image score lists must have equal length")
    if not adapted_per_image:
        return 0.0
    drops = sum(1 for a, b in zip(adapted_per_image, baseline_per_image) if a < b)
    return drops / len(adapted_per_image)


def predict_labels(net, image: np.ndarray) -> np.ndarray:
    """Argmax class map for one (H, W, 3) image; ties go to the lowest index."""
    dtype = next(net.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))[None]).to(dtype)
    with torch.no_grad():
        out = net(x)
    probs = out.seg[0].detach().cpu().numpy()
    return np.argmax(probs, axis=0).astype(np.int64)


def evaluate_model(net, dataset, baseline_per_image=None, subset=None) -> EvalReport:
    """Aggregate confusion over a labeled dataset and fill the report.

    dataset must expose image(i)/labels(i); per-image mIoU uses only that
    image's defined classes. With a baseline per-image list the negative
    transfer rate is filled in.
    """
    num_classes = dataset.spec.num_classes
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    per_image = []
    for i in range(len(dataset)):
        pred = predict_labels(net, dataset.image(i))
        gt = dataset.labels(i)
        cm = confusion(pred, gt, num_classes)
        total += cm
        image_ious = [v for v in per_class_iou(cm) if v is not None]
        per_image.append(float(np.mean(image_ious)) if image_ious else 0.0)
    report = iou_report(total, subset=subset)
    report.per_image_miou = per_image
    if baseline_per_image is not None:
        report.negative_transfer_rate = negative_transfer_rate(per_image, baseline_per_image)
    report.meta = {"num_images": len(dataset), "num_classes": num_classes}
    return report
