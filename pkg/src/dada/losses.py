"""Supervised objectives on source samples and the adversarial objectives.

All losses are pixel means, so loss weights and learning rates carry over
between image resolutions unchanged. Probabilities are clamped at 1e-12
before any log so saturated outputs stay finite.
"""

from dataclasses import dataclass
from typing import Optional

import torch

PROB_CLAMP = 1e-12


@dataclass
class LossValues:
    """Scalar loss report for one training step."""

    seg_loss: float
    depth_loss: float
    source_objective: float
    d_loss: Optional[float] = None
    adv_loss: Optional[float] = None


def seg_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross-entropy of a normalized soft segmentation map.

    probs is (..., C, H, W), labels (..., H, W) with integer classes < C.
    """
    c = probs.shape[-3]
    if labels.shape != probs.shape[:-3] + probs.shape[-2:]:
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match probs "
                         f"{tuple(probs.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= c):
        raise ValueError("class index out of range")
    picked = probs.gather(-3, labels.unsqueeze(-3)).squeeze(-3)
    return -picked.clamp_min(PROB_CLAMP).log().mean()


def berhu(residual: torch.Tensor, c: float) -> torch.Tensor:
    """Reverse Huber penalty: |e| up to threshold c, scaled quadratic beyond.

    Continuous (and with continuous derivative) at |e| = c.
    """
    if c <= 0:
        raise ValueError("berhu threshold must be > 0")
    e = torch.as_tensor(residual)
    a = e.abs()
    return torch.where(a <= c, a, (e * e + c * c) / (2.0 * c))


def depth_loss(pred: torch.Tensor, target: torch.Tensor,
               max_fraction: float = 0.2) -> torch.Tensor:
    """Pixel-mean berHu on the inverse-depth residual.

    The berHu threshold is max_fraction times the maximum absolute residual
    of the image (computed per image for batched input); an image with zero
    residual contributes zero.
    """
    if pred.shape != target.shape:
        raise ValueError(f"depth shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 2:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    e = pred - target
    n = e.shape[0]
    per_image = []
    for i in range(n):
        ei = e[i]
        a = ei.abs()
        c = max_fraction * a.max()
        if float(c) == 0.0:
            per_image.append(ei.sum() * 0.0)
            continue
        val = torch.where(a <= c, a, (ei * ei + c * c) / (2.0 * c))
        per_image.append(val.mean())
    return torch.stack(per_image).mean()


def source_objective(probs, labels, pred_depth, target_depth, lambda_dep: float,
                     berhu_fraction: float = 0.2) -> torch.Tensor:
    """Joint supervised objective: segmentation plus weighted depth regression."""
    if lambda_dep < 0:
        raise ValueError("lambda_dep must be >= 0")
    loss = seg_loss(probs, labels)
    if lambda_dep > 0:
        loss = loss + lambda_dep * depth_loss(pred_depth, target_depth, berhu_fraction)
    return loss


def domain_bce(scores: torch.Tensor, label: int) -> torch.Tensor:
    """Mean binary cross-entropy of raw domain-classifier scores vs a constant label.

    label 1 marks source, 0 target.
    """
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    p = torch.sigmoid(scores)
    if label == 1:
        return -p.clamp_min(PROB_CLAMP).log().mean()
    return -(1.0 - p).clamp_min(PROB_CLAMP).log().mean()
