"""Feature fusion (correlation and concatenation), same/different heads and losses.

Feature maps are channels-first tensors ``(N, C, H, W)``.  Head outputs are
2-vectors with index 0 = different and index 1 = same.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

EPS = 1e-12
FUSION_MODES = ("both", "correlation_only", "concatenation_only")


@dataclass
class HeadConfig:
    hidden: list[int] = field(default_factory=lambda: [512, 128])


def _check_same(fa, fb):
    if fa.shape != fb.shape:
        raise ValueError(f"feature maps differ in shape: {tuple(fa.shape)} vs {tuple(fb.shape)}")


def correlate(fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
    """Element-wise product; the output keeps the input shape."""
    _check_same(fa, fb)
    return fa * fb


def concatenate(fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
    """Stacks ``fa`` above ``fb`` along the row axis, doubling the height."""
    _check_same(fa, fb)
    return torch.cat([fa, fb], dim=-2)


class Head(nn.Module):
    """Fully connected classifier returning unnormalized same/different scores."""

    def __init__(self, input_shape, hidden=(512, 128)):
        super().__init__()
        self.input_shape = tuple(input_shape)
        layers = [nn.Flatten()]
        width = math.prod(self.input_shape)
        for h in hidden:
            layers += [nn.Linear(width, h), nn.SiLU()]
            width = h
        layers.append(nn.Linear(width, 2))
        self.net = nn.Sequential(*layers)

    def forward(self, fused):
        if tuple(fused.shape[1:]) != self.input_shape:
            raise ValueError(f"head expects input {self.input_shape}, got {tuple(fused.shape[1:])}")
        return self.net(fused)


def head_forward(head: Head, fused: torch.Tensor) -> torch.Tensor:
    """Probabilities ``(N, 2)`` for a batch of fused maps."""
    return torch.softmax(head(fused), dim=-1)


def head_loss(y: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the true class.

    ``y`` is ``(N, 2)`` probabilities, ``gt`` holds labels in {0, 1}.
    """
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape[0] != gt.shape[0]:
        raise ValueError(f"batch size mismatch: {y.shape[0]} predictions, {gt.shape[0]} labels")
    picked = y.gather(1, gt.long().view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(EPS)).mean()


def total_loss(l_corr, l_concat):
    return l_corr + l_concat
