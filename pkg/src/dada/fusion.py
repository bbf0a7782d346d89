"""Output-space transforms for adversarial alignment.

A soft segmentation map is turned into a per-pixel, per-class weighted
self-information ("surprisal") map, optionally rescaled pixel-wise by the
predicted inverse depth so that nearer scene content weighs more in the
adversarial loss.
"""

import math

import torch

# log base for the surprisal map; base 2 keeps values within [0, 1],
# LOG_BASE = math.e selects the natural-log variant
LOG_BASE = 2.0

# element-wise maximum of -p*log2(p) over p in [0, 1]
SURPRISAL_MAX_BASE2 = 1.0 / (math.e * math.log(2.0))


def self_information(probs: torch.Tensor, base: float = LOG_BASE) -> torch.Tensor:
    """Element-wise -p*log(p) with the continuity convention 0*log(0) = 0.

    Zero exactly where p is 0 or 1; gradients flow only through positive
    entries.
    """
    mask = probs > 0
    safe = torch.where(mask, probs, torch.ones_like(probs))
    out = -safe * torch.log(safe) / math.log(base)
    return torch.where(mask, out, torch.zeros_like(probs))


def dada_fusion(surprisal: torch.Tensor, inv_depth: torch.Tensor) -> torch.Tensor:
    """Weight a surprisal map by predicted inverse depth, broadcast over classes.

    surprisal is (..., C, H, W) and inv_depth (..., H, W) or (..., 1, H, W);
    nearer pixels (larger inverse depth) come out up-weighted.
    """
    if inv_depth.dim() == surprisal.dim() - 1:
        inv_depth = inv_depth.unsqueeze(-3)
    if surprisal.shape[-2:] != inv_depth.shape[-2:]:
        raise ValueError(
            f"spatial shape mismatch: surprisal {tuple(surprisal.shape[-2:])} "
            f"vs inv_depth {tuple(inv_depth.shape[-2:])}")
    return surprisal * inv_depth
