"""Conditional discriminator, speaker classifier and the StarGAN-style objectives.

The generator-side losses take the noisy input ``x`` and score the output
against the clean source ``y``; the cycle path back-converts with AutoVC
alone (no second enhancement pass).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .conversion_model import Generator
from .profiles import ConvSpec, ModelConfig
from .se_model import FeatureNorm, uniform_fan_in_

LOG_CLAMP = 1e-12


class FrameCountError(ValueError):
    pass


def _time_pad(kernel_t: int) -> int:
    return (kernel_t - 1) // 2


def _mel_pad(kernel_m: int, n_mels: int) -> int:
    # full-height kernels collapse the mel axis; short ones preserve it
    return 0 if kernel_m >= n_mels else (kernel_m - 1) // 2


def min_frames(layers: tuple[ConvSpec, ...], time_pads: list[int]) -> int:
    """Smallest input length that leaves every layer with at least one output frame."""
    T = 1
    while True:
        w, ok = T, True
        for (_, (_, kt), (_, st)), p in zip(layers, time_pads):
            w = (w + 2 * p - kt) // st + 1
            if w < 1:
                ok = False
                break
        if ok:
            return T
        T += 1


class _ConvStack(nn.Module):
    def __init__(self, in_ch: int, layers, n_mels: int, time_pads: list[int], mel_pads: list[int]):
        super().__init__()
        convs = []
        for (ch, k, s), tp, mp in zip(layers, time_pads, mel_pads):
            convs.append(nn.Conv2d(in_ch, ch, k, stride=s, padding=(mp, tp)))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.min_frames = min_frames(tuple(layers), time_pads)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, 0.2)
        return h

    @property
    def last(self) -> nn.Conv2d:
        return self.convs[-1]


class Discriminator(nn.Module):
    """Real/fake score conditioned on a speaker attribute via constant input planes."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_speakers = cfg.n_speakers
        self.norm = FeatureNorm(cfg.n_mels)
        layers = cfg.discriminator
        self.stack = _ConvStack(
            1 + cfg.n_speakers,
            layers,
            cfg.n_mels,
            [_time_pad(k[1]) for _, k, _ in layers],
            [_mel_pad(k[0], cfg.n_mels) for _, k, _ in layers],
        )
        self.min_frames = self.stack.min_frames
        uniform_fan_in_(self)

    def logits(self, lms: torch.Tensor, attr: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid score, one per utterance."""
        if lms.shape[1] < self.min_frames:
            raise FrameCountError(f"discriminator needs >= {self.min_frames} frames, got {lms.shape[1]}")
        z = self.norm(lms).transpose(1, 2).unsqueeze(1)  # (B, 1, mel, T)
        planes = attr.to(z.dtype)[:, :, None, None].expand(-1, -1, z.shape[2], z.shape[3])
        h = self.stack(torch.cat([z, planes], dim=1))
        return h.mean(dim=(1, 2, 3))

    def forward(self, lms, attr) -> torch.Tensor:
        return torch.sigmoid(self.logits(lms, attr))


class SpeakerClassifier(nn.Module):
    """Strided Conv2d stack average-pooled to one logit per speaker."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.classifier[-1][0] != cfg.n_speakers:
            raise ValueError("last classifier layer must have one channel per speaker")
        self.norm = FeatureNorm(cfg.n_mels)
        layers = cfg.classifier
        # time kernels of 2 with stride 4 would shrink short crops to nothing; pad 1 frame per side
        self.stack = _ConvStack(
            1, layers, cfg.n_mels, [1 if k[1] > 1 else 0 for _, k, _ in layers], [0] * len(layers)
        )
        self.min_frames = self.stack.min_frames
        uniform_fan_in_(self)

    def logits(self, lms: torch.Tensor) -> torch.Tensor:
        if lms.shape[1] < self.min_frames:
            raise FrameCountError(f"classifier needs >= {self.min_frames} frames, got {lms.shape[1]}")
        z = self.norm(lms).transpose(1, 2).unsqueeze(1)
        return self.stack(z).mean(dim=(2, 3))

    def forward(self, lms) -> torch.Tensor:
        return torch.softmax(self.logits(lms), dim=-1)


def discriminate(lms, attr, D: Discriminator) -> torch.Tensor:
    if lms.dim() == 2:
        return D(lms.unsqueeze(0), attr.reshape(1, -1))[0]
    return D(lms, attr)


def classify(lms, C: SpeakerClassifier) -> torch.Tensor:
    if lms.dim() == 2:
        return C(lms.unsqueeze(0))[0]
    return C(lms)


# ---------------------------------------------------------------------------
# losses on probabilities
# ---------------------------------------------------------------------------


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=LOG_CLAMP))


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(discriminator loss, generator loss) from D's probabilities on real and generated batches."""
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("empty batch")
    loss_d = -_safe_log(d_real).mean() - _safe_log(1.0 - d_fake).mean()
    loss_g = -_safe_log(d_fake).mean()
    return loss_d, loss_g


def classification_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log posterior of ``labels`` (integer speaker indices)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= probs.shape[-1]:
        raise IndexError(f"speaker index outside [0, {probs.shape[-1]})")
    return -_safe_log(probs.gather(-1, labels.reshape(-1, 1))).mean()


def classification_losses(p_real, real_labels, p_fake, fake_labels) -> tuple[torch.Tensor, torch.Tensor]:
    """(classifier loss on real speech, generator loss on converted speech)."""
    return classification_loss(p_real, real_labels), classification_loss(p_fake, fake_labels)


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean(torch.abs(a - b))


def cycle_loss(x, y, src, tgt, G: Generator) -> torch.Tensor:
    converted = G(x, src, tgt)
    back = G.autovc(converted, tgt, src)[1]
    return l1(back, y)


def identity_loss(x, y, src, G: Generator) -> torch.Tensor:
    return l1(G(x, src, src), y)


def gradient_penalty(
    score_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    attr: torch.Tensor,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """E[(||grad_u score(u, attr)||_2 - 1)^2] at u = eps*real + (1-eps)*fake, eps ~ U(0,1) per sample."""
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator, dtype=real.dtype)
    eps = eps.reshape(-1, *([1] * (real.dim() - 1))).to(real.dtype)
    u = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    score = score_fn(u, attr)
    grad = None
    if score.requires_grad:
        (grad,) = torch.autograd.grad(score.sum(), u, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(u)
    norms = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return torch.mean((norms - 1.0) ** 2)


# ---------------------------------------------------------------------------
# combined objectives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    cyc: float = 10.0
    idm: float = 5.0
    gp: float = 10.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"lambda_{k} must be >= 0, got {v}")


def generator_objective(G: Generator, D: Discriminator, C: SpeakerClassifier, x, y, src, tgt, w: LossWeights):
    """Total generator loss and its terms. ``src``/``tgt`` are one-hot."""
    fake = G(x, src, tgt)
    adv = -_safe_log(D(fake, tgt)).mean()
    cls = classification_loss(C(fake), tgt.argmax(-1))
    cyc = l1(G.autovc(fake, tgt, src)[1], y)
    idm = identity_loss(x, y, src, G)
    total = adv + w.cls * cls + w.cyc * cyc + w.idm * idm
    return total, {"adv_F": adv, "cls_F": cls, "cyc_F": cyc, "idm_F": idm}


def classifier_objective(C: SpeakerClassifier, real, real_labels):
    loss = classification_loss(C(real), real_labels)
    return loss, {"cls_C": loss}


def discriminator_objective(D: Discriminator, real, real_attr, fake, fake_attr, w: LossWeights, eps=None, generator=None):
    adv, _ = adversarial_losses(D(real, real_attr), D(fake, fake_attr))
    gp = gradient_penalty(D.logits, real, fake, fake_attr, eps=eps, generator=generator)
    total = adv + w.gp * gp
    return total, {"adv_D": adv, "gp_D": gp}
