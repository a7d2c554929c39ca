"""Training objectives. Every function returns a scalar tensor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .discriminator import N_CLASSES

EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value=None):
        super().__init__(f"non-finite value in loss term '{term}'" + ("" if value is None else f": {value}"))
        self.term = term


@dataclass
class LossWeights:
    lambda_cycle_blend: float = 0.8
    w_adv: float = 1.0
    w_cycle: float = 1.0
    w_class: float = 1.0
    w_seg: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")
        if self.lambda_cycle_blend > 1:
            raise ValueError(f"lambda_cycle_blend must lie in [0, 1], got {self.lambda_cycle_blend}")


def _same_shape(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NonFiniteLossError(name)


def seg_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Pixel-averaged cross-entropy between predicted and one-hot cue maps.

    Channels are dimension -3, so both CxHxW and BxCxHxW layouts work.
    """
    _same_shape("seg_loss", pred, target)
    return -(target * torch.log(pred + eps)).sum(dim=-3).mean()


def adversarial_loss_d(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """-log sigmoid(real) - log(1 - sigmoid(fake)), averaged over patches."""
    _finite("adversarial_loss_d", d_real, d_fake)
    # -log(sigmoid(z)) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    return F.softplus(-d_real).mean() + F.softplus(d_fake).mean()


def adversarial_loss_g(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -log sigmoid(fake)."""
    _finite("adversarial_loss_g", d_fake)
    return F.softplus(-d_fake).mean()


def cycle_l1(x, x_rec, y, y_rec) -> torch.Tensor:
    _same_shape("cycle_l1 (x)", x, x_rec)
    _same_shape("cycle_l1 (y)", y, y_rec)
    return (x_rec - x).abs().mean() + (y_rec - y).abs().mean()


def _feature_distance(phi, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        fa, fb = phi(a), phi(b)
    except Exception as err:
        raise RuntimeError(f"perceptual extractor failed on input of shape {tuple(a.shape)}: {err}") from err
    total = a.new_zeros(())
    for j, (u, v) in enumerate(zip(fa, fb)):
        _same_shape(f"perceptual layer {j}", u, v)
        h, w = u.shape[-2:]
        # squared L2 over channels, summed over positions, / (H_j W_j), averaged over the batch
        total = total + (u - v).pow(2).flatten(-3).sum(-1).mean() / (h * w)
    return total


def perceptual_loss(phi, x, x_rec, y, y_rec) -> torch.Tensor:
    """Feature-space reconstruction error of both cycles through a frozen extractor."""
    return _feature_distance(phi, x, x_rec) + _feature_distance(phi, y, y_rec)


def cycle_total(l1, perc, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * l1 + (1 - lam) * perc


def _class_targets(target, batch: int, device) -> torch.Tensor:
    target = torch.as_tensor(target, dtype=torch.long, device=device)
    if target.ndim == 0:
        target = target.expand(batch)
    if ((target < 0) | (target >= N_CLASSES)).any():
        raise ValueError(f"class index outside [0, {N_CLASSES}): {target.tolist()}")
    return target


def classification_loss(logits_gx, target_y, logits_fy, target_x) -> torch.Tensor:
    """Cross-entropy pushing G(x) toward class y and F(y) toward class x."""
    logits_gx = torch.atleast_2d(logits_gx)
    logits_fy = torch.atleast_2d(logits_fy)
    ty = _class_targets(target_y, len(logits_gx), logits_gx.device)
    tx = _class_targets(target_x, len(logits_fy), logits_fy.device)
    return F.cross_entropy(logits_gx, ty) + F.cross_entropy(logits_fy, tx)


def total_generator_loss(adv_g_xy, adv_g_yx, cycle, classify, seg_x, seg_y, w: LossWeights):
    """Weighted sum of the generator terms; ``None`` segmentation terms are skipped."""
    terms = {"adv_g_xy": adv_g_xy, "adv_g_yx": adv_g_yx, "cycle": cycle, "classify": classify,
             "seg_x": seg_x, "seg_y": seg_y}
    for name, value in terms.items():
        if value is None:
            continue
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    total = w.w_adv * (adv_g_xy + adv_g_yx) + w.w_cycle * cycle + w.w_class * classify
    if seg_x is not None:
        total = total + w.w_seg * seg_x
    if seg_y is not None:
        total = total + w.w_seg * seg_y
    return total
