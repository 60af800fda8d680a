"""Probabilistic context normalization and the residual block built on it.

Given features ``X`` and a soft damage map ``H`` (1 = damaged), the layer
re-standardizes the damaged part of ``X`` with the mean/std of the clean part,
mixes it with the untouched features through a per-channel gate ``beta`` and
leaves the clean region unchanged::

    PCN(X, H) = [beta * T(X, H) + (1 - beta) * X * H] * H + X * (1 - H)
    T(X, H)   = (X_P - mu(X_P, H)) / sigma(X_P, H) * sigma(X_Q, 1 - H) + mu(X_Q, 1 - H)

with ``X_P = X * H`` and ``X_Q = X * (1 - H)``.  When ``H`` is identically 1
the clean statistics degenerate to ``mu = 0, sigma = sqrt(eps)`` and ``T``
collapses toward zero; that epsilon-guarded behavior is intentional.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .numerics import DEFAULT, masked_mean, masked_std, nn_downsample
from .errors import ConfigError


def transfer_op(x: Tensor, h: Tensor, eps: float = DEFAULT.epsilon) -> Tensor:
    """Move the clean-region statistics onto the damaged-region features."""
    hb = 1 - h
    xp = x * h
    xq = x * hb
    mu_p = masked_mean(xp, h, eps, keepdim=True)
    sd_p = masked_std(xp, h, eps, keepdim=True)
    mu_q = masked_mean(xq, hb, eps, keepdim=True)
    sd_q = masked_std(xq, hb, eps, keepdim=True)
    return (xp - mu_p) / sd_p * sd_q + mu_q


def pcn_combine(x: Tensor, h: Tensor, beta: Tensor, eps: float = DEFAULT.epsilon) -> Tensor:
    """PCN with an explicit gate; ``beta`` is ``(N, C)`` or broadcastable to ``x``."""
    if beta.dim() == 2:
        beta = beta[:, :, None, None]
    return (beta * transfer_op(x, h, eps) + (1 - beta) * x * h) * h + x * (1 - h)


class SeGate(nn.Module):
    """Squeeze-excitation gate: ``sigmoid(W2 relu(W1 mean_hw(X)))``, bias-free."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.fc1 = nn.Linear(channels, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, channels, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"gate expects {self.channels} channels, got {x.shape[1]}")
        pooled = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))


def se_gate(x: Tensor, gate: SeGate) -> Tensor:
    return gate(x)


def pcn_apply(x: Tensor, h: Tensor, gate: SeGate, eps: float = DEFAULT.epsilon) -> Tensor:
    return pcn_combine(x, h, gate(x), eps)


class PCN(nn.Module):
    """PCN layer that resamples the full-resolution mask to the feature grid."""

    def __init__(self, channels: int, reduction: int = 4, eps: float = DEFAULT.epsilon):
        super().__init__()
        self.gate = SeGate(channels, reduction)
        self.eps = eps

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        h = nn_downsample(mask, x.shape[-2], x.shape[-1])
        return pcn_apply(x, h, self.gate, self.eps)


class PCB(nn.Module):
    """Residual block ``x + PCN(conv(act(PCN(conv(x)))))``; each PCN owns its gate."""

    def __init__(self, channels: int, reduction: int = 4, eps: float = DEFAULT.epsilon, slope: float = 0.2):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.pcn1 = PCN(channels, reduction, eps)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.pcn2 = PCN(channels, reduction, eps)
        self.slope = slope

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"PCB expects {self.channels} channels, got {x.shape[1]}")
        y = self.pcn1(self.conv1(x), mask)
        y = F.leaky_relu(y, self.slope)
        y = self.pcn2(self.conv2(y), mask)
        return x + y


def pcb_forward(x: Tensor, mask: Tensor, block: PCB) -> Tensor:
    return block(x, mask)
