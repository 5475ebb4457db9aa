"""Exponential-logarithmic Dice plus class-weighted cross-entropy, per decoder scale.

    loss  = dice_term + ce_term
    dice  = 0.4 * (-ln D_kidney)^0.3 + 0.6 * (-ln D_tumor)^0.3
    ce    = 0.28 * CE_bg + 0.28 * CE_kidney + 0.44 * CE_tumor

Soft Dice is pooled over batch and space. ``-ln D`` and the probabilities
inside the log are floored at ``log_floor`` so gradients stay bounded at a
perfect prediction; the loss floor is therefore ``log_floor**0.3``, not 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    dice_exponent: float = 0.3
    dice_weights: Tuple[float, float] = (0.4, 0.6)  # kidney, tumor
    ce_weights: Tuple[float, float, float] = (0.28, 0.28, 0.44)  # bg, kidney, tumor
    dice_smooth: float = 1e-5
    log_floor: float = 1e-6
    level_weights: Optional[Tuple[float, ...]] = None

    def violations(self) -> List[str]:
        errs = []
        if len(self.ce_weights) != 3 or abs(sum(self.ce_weights) - 1.0) > 1e-9:
            errs.append(f"ce_weights must be 3 values summing to 1, got {self.ce_weights}")
        if len(self.dice_weights) != 2 or abs(sum(self.dice_weights) - 1.0) > 1e-9:
            errs.append(f"dice_weights must be 2 values summing to 1, got {self.dice_weights}")
        if any(w < 0 for w in tuple(self.ce_weights) + tuple(self.dice_weights)):
            errs.append("class weights must be nonnegative")
        if not self.dice_exponent > 0:
            errs.append(f"dice_exponent must be > 0, got {self.dice_exponent}")
        if not self.dice_smooth > 0 or not 0 < self.log_floor < 1:
            errs.append("dice_smooth must be > 0 and log_floor in (0, 1)")
        if self.level_weights is not None:
            w = self.level_weights
            if any(v <= 0 for v in w) or abs(sum(w) - 1.0) > 1e-9:
                errs.append(f"level_weights must be positive and sum to 1, got {tuple(w)}")
        return errs

    def weights_for(self, n_levels: int) -> List[float]:
        if self.level_weights is not None:
            if len(self.level_weights) != n_levels:
                raise ValueError(
                    f"{len(self.level_weights)} level weights for {n_levels} supervised levels")
            return [float(v) for v in self.level_weights]
        return default_level_weights(n_levels)

    @property
    def floor_value(self) -> float:
        """Loss of a perfect prediction."""
        return self.log_floor ** self.dice_exponent * sum(self.dice_weights)

    def to_dict(self) -> dict:
        return asdict(self)


def default_level_weights(n_levels: int) -> List[float]:
    raw = [2.0 ** -l for l in range(n_levels)]
    total = sum(raw)
    return [r / total for r in raw]


def one_hot(labels: torch.Tensor, num_classes: int = 3) -> torch.Tensor:
    """(B, X, Y, Z) integer labels -> (B, C, X, Y, Z) float one-hot."""
    return F.one_hot(labels.long(), num_classes).movedim(-1, 1)


def soft_dice(probs: torch.Tensor, target: torch.Tensor, cls: int,
              smooth: float = 1e-5) -> torch.Tensor:
    p = probs[:, cls]
    y = target[:, cls].to(p.dtype)
    return (2 * (p * y).sum() + smooth) / (p.sum() + y.sum() + smooth)


def exp_log_dice(dice_kidney, dice_tumor, config: LossConfig = LossConfig()) -> torch.Tensor:
    dk = torch.as_tensor(dice_kidney, dtype=torch.float64) \
        if not torch.is_tensor(dice_kidney) else dice_kidney
    dt = torch.as_tensor(dice_tumor, dtype=dk.dtype) \
        if not torch.is_tensor(dice_tumor) else dice_tumor
    g = config.dice_exponent
    wk, wt = config.dice_weights
    term_k = (-torch.log(dk)).clamp_min(config.log_floor) ** g
    term_t = (-torch.log(dt)).clamp_min(config.log_floor) ** g
    return wk * term_k + wt * term_t


def weighted_ce(probs: torch.Tensor, labels: torch.Tensor,
                config: LossConfig = LossConfig()) -> torch.Tensor:
    """Sum over classes of weight * mean(-ln p_true) over that class's voxels."""
    logp = torch.log(probs.clamp(config.log_floor, 1.0))
    labels = labels.long()
    nll = -logp.gather(1, labels.unsqueeze(1)).squeeze(1)
    total = probs.new_zeros(())
    for cls, w in enumerate(config.ce_weights):
        mask = labels == cls
        count = mask.sum()
        if count > 0:
            total = total + w * nll[mask].sum() / count
    return total


def loss_components(logits: torch.Tensor, labels: torch.Tensor,
                    config: LossConfig = LossConfig()) -> Tuple[torch.Tensor, torch.Tensor]:
    probs = torch.softmax(logits, dim=1)
    target = one_hot(labels, probs.shape[1])
    dk = soft_dice(probs, target, 1, config.dice_smooth)
    dt = soft_dice(probs, target, 2, config.dice_smooth)
    return exp_log_dice(dk, dt, config), weighted_ce(probs, labels, config)


def total_loss(logits: torch.Tensor, labels: torch.Tensor,
               config: LossConfig = LossConfig()) -> torch.Tensor:
    dice, ce = loss_components(logits, labels, config)
    return dice + ce


def downsample_labels(labels, level: int):
    """Keep every 2^level-th voxel along each spatial (last three) axis."""
    if level == 0:
        return labels
    step = 2 ** level
    shape = labels.shape[-3:]
    if any(s % step for s in shape):
        raise ValueError(f"label spatial shape {tuple(shape)} not divisible by {step}")
    return labels[..., ::step, ::step, ::step]


def multiscale_loss(logits: Sequence[torch.Tensor], labels: torch.Tensor,
                    config: LossConfig = LossConfig()) -> torch.Tensor:
    weights = config.weights_for(len(logits))
    total = None
    for level, (out, w) in enumerate(zip(logits, weights)):
        lab = downsample_labels(labels, level)
        if tuple(out.shape[2:]) != tuple(lab.shape[-3:]):
            raise ValueError(
                f"head {level} shape {tuple(out.shape[2:])} != label shape {tuple(lab.shape[-3:])}")
        term = w * total_loss(out, lab, config)
        total = term if total is None else total + term
    return total

