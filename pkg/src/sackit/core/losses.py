"""
Segmentation losses on probability maps: BCE, squared-denominator Dice, and the
two hybrid forms used in the hyperparameter study.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

import torch

from .common import ConfigurationError, DegenerateInputError, ShapeError

logger = logging.getLogger(__name__)

LOSS_KINDS = ("bce", "dice", "convex_hybrid", "weighted_hybrid")
REDUCTIONS = ("sum", "mean")
CLAMP_EPS = 1e-7
DEFAULT_SMOOTH = 1e-6


@dataclass(frozen=True)
class LossForm:
    kind: str = "weighted_hybrid"
    lam: Optional[float] = None
    reduction: str = "mean"
    smooth: float = DEFAULT_SMOOTH

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"Unknown loss kind '{self.kind}', expected one of {LOSS_KINDS}")
        if self.reduction not in REDUCTIONS:
            raise ConfigurationError(f"Unknown BCE reduction '{self.reduction}'")
        if self.smooth < 0:
            raise ConfigurationError(f"Dice smooth term must be non-negative, got {self.smooth}")
        if self.kind == "convex_hybrid":
            if self.lam is None or not 0.0 <= self.lam <= 1.0:
                raise ConfigurationError(f"convex_hybrid needs lambda in [0, 1], got {self.lam}")
        elif self.kind == "weighted_hybrid":
            if self.lam is None or not self.lam > 0.0:
                raise ConfigurationError(f"weighted_hybrid needs lambda > 0, got {self.lam}")
        elif self.lam is not None:
            raise ConfigurationError(f"Loss kind '{self.kind}' takes no lambda")

    @property
    def has_lambda(self) -> bool:
        return self.kind in ("convex_hybrid", "weighted_hybrid")

    def describe(self) -> str:
        if self.kind == "convex_hybrid":
            return f"{self.lam:g}*BCE + {1 - self.lam:g}*Dice"
        if self.kind == "weighted_hybrid":
            return f"BCE + {self.lam:g}*Dice"
        return self.kind.upper() if self.kind == "bce" else "Dice"

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "lambda": self.lam, "reduction": self.reduction, "smooth": self.smooth}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossForm":
        return cls(
            kind=data.get("kind", "weighted_hybrid"),
            lam=data.get("lambda", data.get("lam")),
            reduction=data.get("reduction", "mean"),
            smooth=data.get("smooth", DEFAULT_SMOOTH),
        )


def _pair(p, g):
    p = torch.as_tensor(p)
    if not torch.is_floating_point(p):
        p = p.to(torch.get_default_dtype())
    g = torch.as_tensor(g, dtype=p.dtype)
    if p.shape != g.shape:
        raise ShapeError(f"Prediction {tuple(p.shape)} and target {tuple(g.shape)} differ in shape")
    return p, g


def bce_loss(p, g, reduction: str = "mean", clamp_eps: float = CLAMP_EPS) -> torch.Tensor:
    """-sum(g log p + (1-g) log(1-p)), optionally divided by the element count."""
    p, g = _pair(p, g)
    if reduction not in REDUCTIONS:
        raise ConfigurationError(f"Unknown BCE reduction '{reduction}'")
    p = p.clamp(clamp_eps, 1.0 - clamp_eps)
    total = -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).sum()
    return total / p.numel() if reduction == "mean" else total


def dice_loss(p, g, smooth: float = DEFAULT_SMOOTH) -> torch.Tensor:
    """1 - (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s), pooled over every element."""
    p, g = _pair(p, g)
    if smooth < 0:
        raise ConfigurationError(f"Dice smooth term must be non-negative, got {smooth}")
    numerator = 2.0 * (p * g).sum() + smooth
    denominator = (p * p).sum() + (g * g).sum() + smooth
    if float(denominator.detach()) == 0.0:
        raise DegenerateInputError("Dice loss is undefined for empty prediction and target with smooth=0")
    return 1.0 - numerator / denominator


def hybrid_loss(form: LossForm, p, g) -> torch.Tensor:
    """Evaluate any LossForm; the hybrids reduce exactly to the pure losses at their endpoints."""
    if form.kind == "bce":
        return bce_loss(p, g, form.reduction)
    if form.kind == "dice":
        return dice_loss(p, g, form.smooth)
    if form.kind == "convex_hybrid":
        # endpoint identities must hold bit-for-bit
        if form.lam == 1.0:
            return bce_loss(p, g, form.reduction)
        if form.lam == 0.0:
            return dice_loss(p, g, form.smooth)
        return form.lam * bce_loss(p, g, form.reduction) + (1.0 - form.lam) * dice_loss(p, g, form.smooth)
    return bce_loss(p, g, form.reduction) + form.lam * dice_loss(p, g, form.smooth)
