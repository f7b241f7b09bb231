from typing import Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from diffpretrain.networks.base import init_weights


class SliceScorer(nn.Module):
    """Maps an axial slice (batch, 1, y, x) to one scalar score per slice."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32, 32)):
        super().__init__()
        layers = []
        previous = 1
        for width in widths:
            layers += [nn.Conv2d(previous, width, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
            previous = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(previous, 1)
        init_weights(self, std=0.1)

    def forward(self, slices: torch.Tensor) -> torch.Tensor:
        h = self.features(slices)
        return self.head(h.mean(dim=(2, 3))).squeeze(-1)


def bpr_losses(scores: torch.Tensor, slice_gap: int = 1) -> Tuple[torch.Tensor, torch.Tensor]:
    """Order and distance losses for scores of equidistant slices in head-to-tail order.

    ``scores`` is (m,) or (batch, m); slices are ``slice_gap`` indices apart, so equal score
    steps are expected between neighbours.
    """
    if scores.shape[-1] < 3:
        raise ValueError(f"need at least 3 slices per sample, got {scores.shape[-1]}")
    if slice_gap < 1:
        raise ValueError(f"slice_gap must be >= 1, got {slice_gap}")
    steps = scores[..., 1:] - scores[..., :-1]
    order_loss = F.softplus(-steps).sum()
    curvature = steps[..., 1:] - steps[..., :-1]
    dist_loss = F.smooth_l1_loss(curvature, torch.zeros_like(curvature), reduction="sum")
    return order_loss, dist_loss
