"""Noise-robust voice conversion: a BLSTM enhancer cascaded into an AutoVC generator,
trained jointly and then adversarially against a conditional discriminator and a
speaker classifier, evaluated by mel-cepstral distortion on a synthetic corpus."""

from .kernels import BACKEND
from .profiles import ModelConfig, get_profile, paper_profile, tiny_profile

__version__ = "0.1.0"

__all__ = ["BACKEND", "ModelConfig", "get_profile", "paper_profile", "tiny_profile", "__version__"]
