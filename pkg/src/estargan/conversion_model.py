"""AutoVC generator and the composed enhancer-then-convert generator.

Shapes are batch-first: log-mel ``(B, T, 80)``, attributes ``(B, K)``
one-hot. Unbatched ``(T, 80)`` / ``(K,)`` inputs are accepted by the
module-level functions.
"""

from __future__ import annotations

import torch
from torch import nn

from .profiles import ModelConfig
from .se_model import FeatureNorm, SpeechEnhancer, mse, uniform_fan_in_


class BottleneckError(ValueError):
    pass


def broadcast_attr(x: torch.Tensor, attr: torch.Tensor) -> torch.Tensor:
    """Concatenate a per-utterance attribute vector to every frame."""
    return torch.cat([x, attr.unsqueeze(1).expand(-1, x.shape[1], -1).to(x.dtype)], dim=-1)


class Encoder(nn.Module):
    """Conv1d stack with instance norm, then a BLSTM; 16x down/up-sampled code."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.freq = cfg.bottleneck
        self.hidden = cfg.enc_hidden
        layers = []
        in_ch = cfg.n_mels + cfg.n_speakers
        for _ in range(cfg.enc_conv_layers):
            layers += [
                nn.Conv1d(in_ch, cfg.enc_conv_channels, cfg.enc_kernel, stride=1, padding=cfg.enc_kernel // 2),
                nn.InstanceNorm1d(cfg.enc_conv_channels, affine=True),
                nn.ReLU(),
            ]
            in_ch = cfg.enc_conv_channels
        self.convs = nn.Sequential(*layers)
        self.blstm = nn.LSTM(in_ch, cfg.enc_hidden, num_layers=cfg.enc_layers, batch_first=True, bidirectional=True)
        uniform_fan_in_(self)

    def forward(self, z: torch.Tensor, attr: torch.Tensor) -> torch.Tensor:
        """``z`` is normalized log-mel (B, T, 80); returns the up-sampled code (B, T, 2H)."""
        T = z.shape[1]
        if T % self.freq:
            raise BottleneckError(f"frame count {T} is not a multiple of {self.freq}")
        h = self.convs(broadcast_attr(z, attr).transpose(1, 2)).transpose(1, 2)
        out, _ = self.blstm(h)
        fwd, bwd = out[..., : self.hidden], out[..., self.hidden :]
        # forward state at block ends, backward state at block starts
        codes = torch.cat([fwd[:, self.freq - 1 :: self.freq], bwd[:, :: self.freq]], dim=-1)
        return codes.repeat_interleave(self.freq, dim=1)


class Decoder(nn.Module):
    """Stacked unidirectional LSTMs over [code, target attribute], then an 80-node output layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        sizes = (cfg.content_dim + cfg.n_speakers, *cfg.dec_hidden)
        self.lstms = nn.ModuleList(nn.LSTM(a, b, batch_first=True) for a, b in zip(sizes[:-1], sizes[1:]))
        self.out = nn.Linear(sizes[-1], cfg.n_mels)
        uniform_fan_in_(self)

    def forward(self, code: torch.Tensor, attr: torch.Tensor) -> torch.Tensor:
        h = broadcast_attr(code, attr)
        for lstm in self.lstms:
            h, _ = lstm(h)
        return self.out(h)


class PostNet(nn.Module):
    """Conv1d stack with batch norm producing a residual added to the decoder output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [cfg.n_mels] + [cfg.postnet_channels] * (cfg.postnet_layers - 1) + [cfg.n_mels]
        layers = []
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            layers += [nn.Conv1d(a, b, cfg.postnet_kernel, padding=cfg.postnet_kernel // 2), nn.BatchNorm1d(b)]
            if i < len(chans) - 2:
                layers.append(nn.Tanh())
        self.net = nn.Sequential(*layers)
        uniform_fan_in_(self)
        for m in self.net:
            if isinstance(m, nn.BatchNorm1d):
                nn.init.ones_(m.weight)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z.transpose(1, 2)).transpose(1, 2)


class AutoVC(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = FeatureNorm(cfg.n_mels)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.postnet = PostNet(cfg)

    def encode(self, lms: torch.Tensor, src: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.norm(lms), src)

    def decode(self, code: torch.Tensor, tgt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (decoder output, post-net refined output) in log-mel units."""
        raw = self.decoder(code, tgt)
        refined = raw + self.postnet(raw)
        return self.norm.inverse(raw), self.norm.inverse(refined)

    def forward(self, lms, src, tgt):
        return self.decode(self.encode(lms, src), tgt)


class Generator(nn.Module):
    """Enhancer followed by AutoVC. ``se=None`` gives plain AutoVC on the raw input."""

    def __init__(self, autovc: AutoVC, se: SpeechEnhancer | None = None):
        super().__init__()
        self.autovc = autovc
        self.se = se

    def enhance(self, x: torch.Tensor) -> torch.Tensor:
        return x if self.se is None else self.se(x)

    def forward(self, x, src, tgt) -> torch.Tensor:
        return self.autovc(self.enhance(x), src, tgt)[1]


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------


def _batched(lms: torch.Tensor, *attrs: torch.Tensor):
    if lms.dim() == 2:
        return True, lms.unsqueeze(0), [a.unsqueeze(0) if a.dim() == 1 else a for a in attrs]
    return False, lms, list(attrs)


def encode(lms: torch.Tensor, attr: torch.Tensor, model: AutoVC) -> torch.Tensor:
    single, lms, (attr,) = _batched(lms, attr)
    if attr.shape[-1] != model.cfg.n_speakers:
        raise ValueError(f"attribute length {attr.shape[-1]} != {model.cfg.n_speakers} speakers")
    code = model.encode(lms, attr)
    return code[0] if single else code


def decode(code: torch.Tensor, attr: torch.Tensor, model: AutoVC) -> tuple[torch.Tensor, torch.Tensor]:
    if not torch.isfinite(code).all():
        raise ValueError("non-finite content code")
    single, code, (attr,) = _batched(code, attr)
    raw, refined = model.decode(code, attr)
    return (raw[0], refined[0]) if single else (raw, refined)


def autovc_forward(lms, src, tgt, model: AutoVC) -> tuple[torch.Tensor, torch.Tensor]:
    return decode(encode(lms, src, model), tgt, model)


def generator_forward(x, src, tgt, se: SpeechEnhancer | None, model: AutoVC) -> torch.Tensor:
    enhanced = x if se is None else se(x)
    return autovc_forward(enhanced, src, tgt, model)[1]


def autovc_loss_terms(enhanced: torch.Tensor, src: torch.Tensor, model: AutoVC) -> dict[str, torch.Tensor]:
    """Self-reconstruction terms for AutoVC given the enhanced (or clean) input.

    The content code of the input is not detached, so gradients reach both
    encoder passes.
    """
    code = model.encode(enhanced, src)
    raw, refined = model.decode(code, src)
    return {
        "rec_raw": mse(raw, enhanced),
        "rec_post": mse(refined, enhanced),
        "content": mse(model.encode(refined, src), code),
    }


def autovc_loss(enhanced: torch.Tensor, src: torch.Tensor, model: AutoVC, lambda_auto: float = 1.0) -> torch.Tensor:
    if lambda_auto < 0:
        raise ValueError(f"lambda_auto must be >= 0, got {lambda_auto}")
    _, enhanced, (src,) = _batched(enhanced, src)
    t = autovc_loss_terms(enhanced, src, model)
    return t["rec_raw"] + t["rec_post"] + lambda_auto * t["content"]
