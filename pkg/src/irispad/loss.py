"""Pixel-wise SmoothL1 plus binary cross-entropy, mixed by ``lam``."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError

DEFAULT_LAMBDA = 0.2


@dataclass
class LossBreakdown:
    smooth_l1: torch.Tensor
    bce: torch.Tensor
    overall: torch.Tensor
    lam: float

    def as_floats(self) -> dict[str, float]:
        return {
            "smooth_l1": float(self.smooth_l1),
            "bce": float(self.bce),
            "overall": float(self.overall),
            "lambda": self.lam,
        }


def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of 0.5*d^2 if |d| < 1 else |d| - 0.5, d = target - pred.

    Inputs are (..., H, W); the mean runs over every element, so batched
    maps give the batch mean of per-sample losses.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"map shape {tuple(pred.shape)} != mask shape {tuple(target.shape)}")
    d = (target - pred).abs()
    z = torch.where(d < 1, 0.5 * d * d, d - 0.5)
    return z.mean()


def bce_with_logits(logit: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """-[y log p + (1-y) log(1-p)] with p = sigmoid(logit), averaged over the batch."""
    label = label.to(logit.dtype)
    # log(1 + e^x) - x*y, rearranged so exp never overflows
    loss = logit.clamp(min=0) - logit * label + torch.log1p(torch.exp(-logit.abs()))
    return loss.mean()


def bce(pa_score: float, label: int) -> float:
    """Probability-space BCE for scalar inputs."""
    p = torch.as_tensor(pa_score, dtype=torch.float64)
    logit = torch.log(p) - torch.log1p(-p)
    return float(bce_with_logits(logit, torch.as_tensor(float(label), dtype=torch.float64)))


def make_target_mask(label: int | torch.Tensor, size: int = 14, dtype=torch.float32) -> torch.Tensor:
    """Constant map equal to the label (attack = 1).

    A scalar label gives (size, size); a 1-d tensor of labels gives
    (N, 1, size, size).
    """
    label = torch.as_tensor(label, dtype=dtype)
    if label.dim() == 0:
        if float(label) not in (0.0, 1.0):
            raise ConfigError(f"label must be 0 or 1, got {float(label)}")
        return torch.full((size, size), float(label), dtype=dtype)
    if not torch.all((label == 0) | (label == 1)):
        raise ConfigError("labels must be 0 or 1")
    return label.view(-1, 1, 1, 1).expand(-1, 1, size, size).clone()


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return lam


def overall_loss(output, labels: torch.Tensor, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """``lam * SmoothL1(sigmoid(map), mask) + (1 - lam) * BCE``.

    ``output`` is a :class:`~irispad.heads.ModelOutput`. Without a pixel map
    (baseline) the SmoothL1 term is reported as zero and overall = BCE.
    """
    lam = check_lambda(lam)
    labels = torch.as_tensor(labels).to(output.binary_logit.dtype).view(-1)
    b = bce_with_logits(output.binary_logit, labels)
    if output.pixel_map is None:
        zero = torch.zeros((), dtype=b.dtype, device=b.device)
        return LossBreakdown(smooth_l1=zero, bce=b, overall=b, lam=lam)
    pixel_map = output.pixel_map
    mask = make_target_mask(labels, size=pixel_map.shape[-1], dtype=pixel_map.dtype).to(pixel_map.device)
    if pixel_map.shape != mask.shape:
        raise ShapeError(f"pixel map shape {tuple(pixel_map.shape)} is not (N, 1, S, S)")
    s = smooth_l1(torch.sigmoid(pixel_map), mask)
    return LossBreakdown(smooth_l1=s, bce=b, overall=lam * s + (1.0 - lam) * b, lam=lam)
