"""Differentiation substrate contract and gradient auditing.

The package leans on torch for reverse-mode differentiation; this module
pins down the semantics the rest of the code assumes (gradient
accumulation across backward calls, detach severing flow) and provides the
central-difference machinery used to audit every differentiable operation.
"""

import os

import numpy as np
import torch


class NonFiniteLossError(RuntimeError):
    """A loss evaluated to NaN or infinity."""


def backward(loss: torch.Tensor) -> None:
    """Accumulate gradients of a finite scalar loss into its parameters.

    Repeated calls before an optimizer step sum gradients.
    """
    if loss.numel() != 1:
        raise ValueError("backward expects a scalar loss")
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"non-finite loss: {float(loss)}")
    loss.backward()


def detach(value: torch.Tensor) -> torch.Tensor:
    """Same data, gradient flow severed."""
    return value.detach()


def set_deterministic(enabled: bool = True) -> None:
    """Single numeric thread and deterministic kernels for bitwise-reproducible runs."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)
        torch.set_num_threads(max(1, (os.cpu_count() or 1)))


def deterministic_requested() -> bool:
    return os.environ.get("DADA_DETERMINISTIC", "") == "1"


# ---------------------------------------------------------------------------
# finite-difference auditing
# ---------------------------------------------------------------------------

def relative_error(a: float, b: float, zero_tol: float = 1e-9) -> float:
    """|a - b| / max(|a|, |b|); 0 when both magnitudes sit below zero_tol."""
    denom = max(abs(a), abs(b))
    if denom < zero_tol:
        return 0.0
    return abs(a - b) / denom


def finite_difference_probe(fn, x: torch.Tensor, flat_index: int, eps: float) -> float:
    """Central difference of scalar fn at one coordinate of x."""
    with torch.no_grad():
        xp = x.detach().clone()
        xm = x.detach().clone()
        xp.view(-1)[flat_index] += eps
        xm.view(-1)[flat_index] -= eps
        fp = float(fn(xp))
        fm = float(fn(xm))
    return (fp - fm) / (2.0 * eps)


def audit_gradient(fn, x: torch.Tensor, n_probes: int = 100, eps: float = 1e-6,
                   seed: int = 0, exclude=None) -> float:
    """Max relative error between autograd and central differences.

    fn maps a tensor to a scalar; probes hit n_probes random coordinates of
    x (all of them when x is smaller). Coordinates for which exclude(value)
    is true are skipped, which lets callers avoid kinks.
    """
    x = x.detach().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().view(-1)
    flat = x.detach().view(-1)

    rng = np.random.default_rng(seed)
    total = flat.numel()
    if total <= n_probes:
        idx = np.arange(total)
    else:
        idx = rng.choice(total, size=n_probes, replace=False)

    worst = 0.0
    for i in idx:
        i = int(i)
        if exclude is not None and exclude(float(flat[i])):
            continue
        fd = finite_difference_probe(fn, x, i, eps)
        worst = max(worst, relative_error(float(grad[i]), fd))
    return worst
