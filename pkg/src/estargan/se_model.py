"""BLSTM speech enhancer on log-mel features."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .profiles import ModelConfig


class FeatureNorm(nn.Module):
    """Fixed per-bin standardization; identity until stats are set."""

    def __init__(self, n_mels: int = 80):
        super().__init__()
        self.register_buffer("mean", torch.zeros(n_mels))
        self.register_buffer("std", torch.ones(n_mels))

    def set_stats(self, mean, std) -> None:
        self.mean.copy_(torch.as_tensor(np.asarray(mean), dtype=self.mean.dtype))
        self.std.copy_(torch.as_tensor(np.asarray(std), dtype=self.std.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def inverse(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.std + self.mean


def uniform_fan_in_(module: nn.Module) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight, zero biases."""
    for name, p in module.named_parameters():
        if "bias" in name:
            nn.init.zeros_(p)
        elif p.dim() >= 2:
            fan_in = p.shape[1] * (p[0][0].numel() if p.dim() > 2 else 1)
            bound = 1.0 / np.sqrt(fan_in)
            nn.init.uniform_(p, -bound, bound)


class SpeechEnhancer(nn.Module):
    """Two bidirectional LSTM layers, then an affine map from both directions to 80 bins."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm = FeatureNorm(cfg.n_mels)
        self.blstm = nn.LSTM(
            cfg.n_mels, cfg.se_hidden, num_layers=cfg.se_layers, batch_first=True, bidirectional=True
        )
        self.out = nn.Linear(2 * cfg.se_hidden, cfg.n_mels)
        uniform_fan_in_(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        h, _ = self.blstm(self.norm(x))
        y = self.norm.inverse(self.out(h))
        return y.squeeze(0) if squeeze else y


def se_forward(x: torch.Tensor, se: SpeechEnhancer) -> torch.Tensor:
    if x.shape[-2] < 1:
        raise ValueError("input has no frames")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite values in enhancer input")
    return se(x)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean((a - b) ** 2)


def se_loss(enhanced: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    return mse(enhanced, clean)
