"""Architecture profiles.

``paper`` carries the published layer sizes. ``tiny`` keeps every layer and
its ordering but shrinks widths so the whole pipeline trains on one CPU core.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

ConvSpec = tuple[int, tuple[int, int], tuple[int, int]]  # channels, (mel, time) kernel, (mel, time) stride

PAPER_DISCRIMINATOR: tuple[ConvSpec, ...] = (
    (32, (3, 9), (1, 1)),
    (32, (3, 8), (1, 2)),
    (32, (3, 8), (1, 2)),
    (32, (3, 6), (1, 2)),
    (40, (80, 5), (1, 1)),
)
PAPER_CLASSIFIER: tuple[ConvSpec, ...] = (
    (8, (2, 2), (4, 4)),
    (16, (2, 2), (4, 4)),
    (32, (2, 2), (4, 4)),
    (16, (1, 2), (5, 4)),
    (8, (1, 2), (6, 4)),
)


@dataclass(frozen=True)
class ModelConfig:
    n_speakers: int = 8
    n_mels: int = 80
    se_hidden: int = 160
    se_layers: int = 2
    enc_conv_channels: int = 512
    enc_conv_layers: int = 3
    enc_kernel: int = 5
    enc_hidden: int = 512
    enc_layers: int = 2
    dec_hidden: tuple[int, ...] = (512, 1024, 1024)
    postnet_channels: int = 512
    postnet_layers: int = 5
    postnet_kernel: int = 5
    bottleneck: int = 16
    discriminator: tuple[ConvSpec, ...] = PAPER_DISCRIMINATOR
    classifier: tuple[ConvSpec, ...] = PAPER_CLASSIFIER

    @property
    def content_dim(self) -> int:
        return 2 * self.enc_hidden

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["dec_hidden"] = tuple(d["dec_hidden"])
        for key in ("discriminator", "classifier"):
            d[key] = tuple((c, tuple(k), tuple(s)) for c, k, s in d[key])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _with_classifier_output(layers: tuple[ConvSpec, ...], n_speakers: int) -> tuple[ConvSpec, ...]:
    # last classifier layer emits one channel per speaker
    *head, (_, k, s) = layers
    return (*head, (n_speakers, k, s))


def paper_profile(n_speakers: int = 8) -> ModelConfig:
    return ModelConfig(n_speakers=n_speakers, classifier=_with_classifier_output(PAPER_CLASSIFIER, n_speakers))


def tiny_profile(n_speakers: int = 4) -> ModelConfig:
    return ModelConfig(
        n_speakers=n_speakers,
        se_hidden=32,
        enc_conv_channels=16,
        enc_hidden=8,
        dec_hidden=(8, 16, 16),
        postnet_channels=16,
        discriminator=tuple((max(4, c // 4), k, s) for c, k, s in PAPER_DISCRIMINATOR),
        classifier=_with_classifier_output(PAPER_CLASSIFIER, n_speakers),
    )


PROFILES = {"paper": paper_profile, "tiny": tiny_profile}


def get_profile(name: str, n_speakers: int, **overrides) -> ModelConfig:
    try:
        cfg = PROFILES[name](n_speakers)
    except KeyError:
        raise ValueError(f"unknown model profile {name!r}; choose from {sorted(PROFILES)}") from None
    return replace(cfg, **overrides) if overrides else cfg
