"""Mask decoder and the weighted support/query BCE objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class MaskPrediction:
    logits: torch.Tensor  # (..., 2, H, W): background, foreground

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-3)

    @property
    def foreground(self) -> torch.Tensor:
        return self.probabilities[..., 1, :, :]

    @property
    def hard_mask(self) -> torch.Tensor:
        return self.logits.argmax(dim=-3)


class SegmentationHead(nn.Module):
    """conv-relu-upsample twice, then a 1x1 classifier at image resolution."""

    def __init__(self, in_channels: int, width: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width // 2, 3, padding=1)
        self.classifier = nn.Conv2d(width // 2, 2, 1)

    def forward(self, feature: torch.Tensor, out_size: int) -> MaskPrediction:
        grid = feature.shape[-1]
        x = F.relu(self.conv1(feature))
        mid = max(grid, (grid * out_size) ** 0.5)
        x = F.interpolate(x, size=(round(mid),) * 2, mode="bilinear", align_corners=False)
        x = F.relu(self.conv2(x))
        x = F.interpolate(x, size=(out_size, out_size), mode="bilinear", align_corners=False)
        return MaskPrediction(self.classifier(x))


def predict_mask(feature: torch.Tensor, head: SegmentationHead, out_size: int) -> MaskPrediction:
    return head(feature, out_size)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.4
    beta: float = 0.6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")


def bce(prediction, pseudo_mask: torch.Tensor, eps: float = 1e-7, binarize: bool = False) -> torch.Tensor:
    """Mean pixelwise binary cross-entropy of foreground probabilities against a soft target.

    ``prediction`` is a :class:`MaskPrediction` or a foreground-probability map.
    """
    p = prediction.foreground if isinstance(prediction, MaskPrediction) else prediction
    if p.shape != pseudo_mask.shape:
        raise ValueError(f"prediction {tuple(p.shape)} and target {tuple(pseudo_mask.shape)} differ")
    y = (pseudo_mask > 0.5).to(p.dtype) if binarize else pseudo_mask
    p = p.clamp(eps, 1 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def episode_loss(support_preds, support_masks, query_pred, query_mask, weights: LossWeights,
                 eps: float = 1e-7, binarize: bool = False) -> torch.Tensor:
    """alpha * mean-over-shots support BCE + beta * query BCE.

    support_preds/support_masks carry a shot axis: (B, K, ...) / (B, K, H, W).
    """
    p_s = support_preds.foreground if isinstance(support_preds, MaskPrediction) else support_preds
    shots = support_masks.shape[1]
    support_term = sum(bce(p_s[:, k], support_masks[:, k], eps, binarize) for k in range(shots)) / shots
    query_term = bce(query_pred, query_mask, eps, binarize)
    return weights.alpha * support_term + weights.beta * query_term
