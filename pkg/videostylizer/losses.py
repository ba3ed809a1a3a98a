"""Objective terms of both training stages."""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
from dataclasses import dataclass, fields
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from videostylizer.errors import (
    ConfigurationError,
    DimensionError,
    DomainError,
    MissingInputError,
    NumericError,
)
from videostylizer.flowwarp import backward_warp
from videostylizer.nets import FeatureExtractor

PERCEPTUAL_LEVELS = (2, 3)
TEMPORAL_LEVELS = (1, 2, 3)
NORM_FLOOR = 1e-8
LOG_FLOOR = 1e-8


class AdversarialSide(Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


class WarpOperand(Enum):
    """Frame that is warped into the composite target of the warp loss."""

    SOURCE_PREV = "source_prev"
    REFINED_PREV = "refined_prev"


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_recon: float = 10.0
    lambda_perc: float = 1.0
    lambda_warp: float = 1.0
    lambda_temp: float = 0.5
    r1_gamma: float = 1.0

    def __post_init__(self):
        for weight in fields(self):
            if getattr(self, weight.name) < 0:
                raise ConfigurationError(f"Loss weight {weight.name} must be >= 0.")
        if self.lambda_warp == 0 and self.lambda_temp == 0:
            raise ConfigurationError("At least one of lambda_warp and lambda_temp must be > 0.")


def _check_finite(name: str, *tensors: torch.Tensor):
    for tensor in tensors:
        if not torch.isfinite(tensor).all():
            raise NumericError(f"{name} received non-finite values.")


def _check_same_shape(name: str, a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ.")


def adv_loss(
    d_real: Optional[torch.Tensor],
    d_fake: torch.Tensor,
    side: Union[str, AdversarialSide],
    r1_gamma: float = 0.0,
    real_input: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Non-saturating logistic GAN loss, with an R1 penalty on reals for the discriminator.

    Args:
        d_real: Logits of real samples (discriminator side only).
        d_fake: Logits of generated samples.
        side: Which player the loss is for.
        r1_gamma: Weight of the R1 penalty; 0 disables it.
        real_input: The real batch d_real was computed from, with requires_grad set.

    Returns:
        Scalar loss.
    """
    side = AdversarialSide(side)
    if side is AdversarialSide.GENERATOR:
        _check_finite("adv_loss", d_fake)
        return F.softplus(-d_fake).mean()
    if d_real is None:
        raise MissingInputError("The discriminator loss needs logits of real samples.")
    _check_finite("adv_loss", d_real, d_fake)
    loss = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    if r1_gamma > 0:
        if real_input is None:
            raise MissingInputError("The R1 penalty needs the real input batch.")
        (gradient,) = torch.autograd.grad(d_real.sum(), real_input, create_graph=True)
        penalty = gradient.pow(2).reshape(gradient.shape[0], -1).sum(dim=1).mean()
        loss = loss + 0.5 * r1_gamma * penalty
    return loss


def recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same_shape("recon_loss", pred, target)
    return (pred - target).abs().mean()


def _feature_sets(features: torch.Tensor) -> torch.Tensor:
    """B x N x C sets of spatial feature vectors."""
    if features.dim() == 2:
        return features.unsqueeze(0)
    if features.dim() == 3:
        return features.flatten(1).transpose(0, 1).unsqueeze(0)
    if features.dim() == 4:
        return features.flatten(2).transpose(1, 2)
    raise DimensionError(f"Cannot read feature vectors from shape {tuple(features.shape)}.")


def contextual_loss(
    feat_pred: torch.Tensor, feat_target: torch.Tensor, h: float = 0.5, eps: float = 1e-5
) -> torch.Tensor:
    """Contextual loss between two sets of feature vectors of one extractor level.

    Accepts N x C vector sets, C x H x W maps or B x C x H x W batches.
    """
    x = _feature_sets(feat_pred)
    y = _feature_sets(feat_target)
    if x.shape[0] != y.shape[0] or x.shape[2] != y.shape[2]:
        raise DimensionError(
            f"contextual_loss: feature sets {tuple(x.shape)} and {tuple(y.shape)} are incompatible."
        )
    if x.shape[1] == 0 or y.shape[1] == 0:
        raise DimensionError("contextual_loss needs non-empty feature sets.")
    center = y.mean(dim=1, keepdim=True)
    x = x - center
    y = y - center
    x = x / x.norm(dim=2, keepdim=True).clamp_min(NORM_FLOOR)
    y = y / y.norm(dim=2, keepdim=True).clamp_min(NORM_FLOOR)
    # rows index predicted vectors i, columns target vectors j
    distance = (1.0 - torch.bmm(x, y.transpose(1, 2))).clamp_min(0.0)
    relative = distance / (distance.min(dim=2, keepdim=True).values + eps)
    affinity = torch.softmax((1.0 - relative) / h, dim=2)
    context = affinity.max(dim=1).values.mean(dim=1)
    return -torch.log(context + LOG_FLOOR).mean()


def perceptual_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    extractor: FeatureExtractor,
    levels: Sequence[int] = PERCEPTUAL_LEVELS,
) -> torch.Tensor:
    """Contextual loss summed over the given (1-based) extractor levels."""
    _check_same_shape("perceptual_loss", pred, target)
    pred_features = extractor(pred)
    target_features = extractor(target)
    return sum(
        contextual_loss(pred_features[level - 1], target_features[level - 1]) for level in levels
    )


def _safe_rms(difference: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite slope at 0; keep the gradient finite there
    mean_square = difference.pow(2).mean()
    positive = mean_square > 0
    root = torch.sqrt(torch.where(positive, mean_square, torch.ones_like(mean_square)))
    return torch.where(positive, root, torch.zeros_like(mean_square))


def warp_loss(
    x_prev: torch.Tensor,
    f_t: torch.Tensor,
    mask: torch.Tensor,
    intermediate: torch.Tensor,
    y_hat: torch.Tensor,
) -> torch.Tensor:
    """RMS between y_hat and mask * warp(x_prev, f_t) + (1 - mask) * intermediate.

    Args:
        x_prev: Frame to warp, (N x) C x H x W.
        f_t: Backward flow, (N x) 2 x H x W.
        mask: Background probability, (N x) H x W or (N x) 1 x H x W, in [0, 1].
        intermediate: Translator output of the current frame.
        y_hat: Refined current frame.
    """
    _check_same_shape("warp_loss", x_prev, intermediate)
    _check_same_shape("warp_loss", x_prev, y_hat)
    if mask.dim() == x_prev.dim() - 1:
        mask = mask.unsqueeze(-3)
    if mask.shape[-2:] != x_prev.shape[-2:]:
        raise DimensionError(
            f"warp_loss: mask {tuple(mask.shape)} does not match frames {tuple(x_prev.shape)}."
        )
    if mask.numel() and (mask.min() < 0 or mask.max() > 1):
        raise DomainError("warp_loss: the parsing map must lie in [0, 1].")
    target = mask * backward_warp(x_prev, f_t) + (1 - mask) * intermediate
    return _safe_rms(target - y_hat)


def temporal_loss(
    y_prev: torch.Tensor,
    y_cur: torch.Tensor,
    extractor: FeatureExtractor,
    levels: Sequence[int] = TEMPORAL_LEVELS,
) -> torch.Tensor:
    """Sum over extractor levels of the mean absolute feature difference."""
    _check_same_shape("temporal_loss", y_prev, y_cur)
    prev_features = extractor(y_prev)
    cur_features = extractor(y_cur)
    return sum(
        (prev_features[level - 1] - cur_features[level - 1]).abs().mean() for level in levels
    )


def refiner_objective(
    terms: Mapping[str, Union[torch.Tensor, float]], weights: LossWeights
) -> Tuple[Union[torch.Tensor, float], Dict[str, float]]:
    """Weighted sum lambda_warp * warp + lambda_temp * temp.

    Returns:
        The total and the plain float value of every term for logging.
    """
    warp = terms.get("warp", 0.0)
    temp = terms.get("temp", 0.0)
    total = weights.lambda_warp * warp + weights.lambda_temp * temp
    values = {"warp": float(warp), "temp": float(temp), "total": float(total)}
    return total, values


def parse_levels(text: str) -> Tuple[int, ...]:
    """'2,3' -> (2, 3); levels are 1-based and at most 3."""
    try:
        levels = tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise ConfigurationError(f"Cannot read feature levels from '{text}'.")
    if not levels or any(level < 1 or level > 3 for level in levels):
        raise ConfigurationError(f"Feature levels must be within 1..3, got '{text}'.")
    return levels
