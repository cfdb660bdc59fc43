"""Training losses: class-balanced BCE, scene-ratio regression, schedule.

The dense maps carry a class-balanced weighted binary cross-entropy; the
scene branch regresses the image's shadow pixel fraction with a ratio-
weighted smooth-l1 penalty. The two auxiliary map losses share one weight
that decays linearly from 1 to 0 across training.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InputError
from .fusion import PredictionBundle


@dataclass(frozen=True)
class LossConfig:
    background_scale: float = 1.0       # global multiplier on the BCE
    eps: float = 1e-6                   # log stabilizer
    ratio_shift: float = 0.05           # added to the target ratio before weighting
    ratio_power: float = 0.5            # exponent of the ratio weight
    ratio_weight: float = 0.25          # coefficient of the ratio loss in the total
    smooth_l1_beta: float = 1.0         # quadratic/linear transition point
    total_iters: int = 10_000
    class_weight_clamp: tuple[float, float] = (0.0, 50.0)

    def __post_init__(self):
        if self.ratio_shift <= 0 or self.ratio_power <= 0:
            raise InputError("ratio_shift and ratio_power must be positive")
        if self.ratio_weight <= 0 or self.eps <= 0:
            raise InputError("ratio_weight and eps must be positive")
        if self.smooth_l1_beta <= 0 or self.total_iters < 0:
            raise InputError("smooth_l1_beta and total_iters must be positive")


@dataclass
class LossReport:
    """All loss components of one step; tensors stay differentiable."""

    final_loss: torch.Tensor
    patch_cls_loss: torch.Tensor
    patch_text_loss: torch.Tensor
    ratio_loss: torch.Tensor
    total: torch.Tensor
    patch_cls_aux_weight: float = 1.0
    patch_text_aux_weight: float = 1.0

    def as_floats(self) -> "LossReport":
        detach = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)
        return LossReport(
            final_loss=detach(self.final_loss),
            patch_cls_loss=detach(self.patch_cls_loss),
            patch_text_loss=detach(self.patch_text_loss),
            ratio_loss=detach(self.ratio_loss),
            total=detach(self.total),
            patch_cls_aux_weight=self.patch_cls_aux_weight,
            patch_text_aux_weight=self.patch_text_aux_weight,
        )


def _check_binary(mask: torch.Tensor) -> torch.Tensor:
    if not torch.logical_or(mask == 0, mask == 1).all():
        raise InputError("mask must be binary (0/1)")
    return mask


def class_balance_weight(mask: torch.Tensor,
                         clamp: tuple[float, float] = (0.0, 50.0)) -> float:
    """Non-shadow-to-shadow pixel ratio of one mask, clamped.

    Images without any shadow pixel fall back to weight 1 so that purely
    background images remain trainable.
    """
    mask = _check_binary(mask)
    shadow = int((mask == 1).sum())
    if shadow == 0:
        return 1.0
    ratio = int((mask == 0).sum()) / shadow
    return float(min(max(ratio, clamp[0]), clamp[1]))


def weighted_bce(logits: torch.Tensor, mask: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Class-balanced weighted BCE, averaged over pixels.

    The shadow term is scaled by the per-image class balance weight and the
    whole loss by ``background_scale``; eps keeps the logs finite at
    saturated probabilities.
    """
    if logits.shape != mask.shape:
        raise InputError(f"logits shape {tuple(logits.shape)} != mask shape {tuple(mask.shape)}")
    mask = _check_binary(mask).to(logits.dtype)
    weight = class_balance_weight(mask, cfg.class_weight_clamp)
    probs = torch.sigmoid(logits)
    pixel_loss = -(weight * mask * torch.log(probs + cfg.eps)
                   + (1.0 - mask) * torch.log(1.0 - probs + cfg.eps))
    return cfg.background_scale * pixel_loss.mean()


def shadow_ratio(mask: torch.Tensor) -> float:
    """Fraction of shadow pixels in a binary mask."""
    mask = _check_binary(mask)
    return float(mask.to(torch.float64).mean())


def smooth_l1(x, beta: float = 1.0):
    """Quadratic below ``beta``, linear above; continuous at the transition."""
    if beta <= 0:
        raise InputError("smooth_l1 transition point must be positive")
    if not torch.is_tensor(x):
        x = torch.tensor(float(x), dtype=torch.float64)
    absx = x.abs()
    return torch.where(absx < beta, 0.5 * x * x / beta, absx - 0.5 * beta)


def ratio_loss(ratio_logit: torch.Tensor, target_ratio: float,
               cfg: LossConfig) -> torch.Tensor:
    """Ratio-weighted smooth-l1 between the predicted and true shadow ratio.

    The weight (r + shift)^power grows with the true ratio, so images with
    larger shadow coverage pull harder on the scene branch.
    """
    if not 0.0 <= target_ratio <= 1.0:
        raise InputError(f"target ratio {target_ratio} outside [0, 1]")
    if not torch.is_tensor(ratio_logit):
        ratio_logit = torch.tensor(float(ratio_logit), dtype=torch.float64)
    predicted = torch.sigmoid(ratio_logit)
    weight = (target_ratio + cfg.ratio_shift) ** cfg.ratio_power
    return weight * smooth_l1(predicted - target_ratio, cfg.smooth_l1_beta)


def aux_weight(iteration: int, total_iters: int) -> float:
    """Auxiliary-loss weight, linearly decayed from 1 at step 0 to 0 at the end."""
    if total_iters == 0:
        raise InputError("no decay schedule exists for a zero-iteration run")
    if not 0 <= iteration <= total_iters:
        raise InputError(f"iteration {iteration} outside [0, {total_iters}]")
    return 1.0 - iteration / total_iters


def total_loss(bundle: PredictionBundle, mask: torch.Tensor, iteration: int,
               cfg: LossConfig) -> LossReport:
    """Joint objective for one image at one training step."""
    lam = aux_weight(iteration, cfg.total_iters)
    final = weighted_bce(bundle.final_logits, mask, cfg)
    patch_cls = weighted_bce(bundle.patch_cls_logits, mask, cfg)
    patch_text = weighted_bce(bundle.patch_text_logits, mask, cfg)
    ratio = ratio_loss(bundle.ratio_logit, shadow_ratio(mask), cfg)
    total = final + lam * (patch_cls + patch_text) + cfg.ratio_weight * ratio
    return LossReport(
        final_loss=final,
        patch_cls_loss=patch_cls,
        patch_text_loss=patch_text,
        ratio_loss=ratio,
        total=total,
        patch_cls_aux_weight=lam,
        patch_text_aux_weight=lam,
    )
