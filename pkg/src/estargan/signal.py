"""Deterministic DSP front-end: WAV I/O, SNR mixing, STFT, mel features and their inversion."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import kernels

SAMPLE_RATE = 16000
N_FFT = 1024  # 64 ms at 16 kHz
HOP = 256  # 16 ms at 16 kHz
N_MELS = 80
LOG_FLOOR = 1e-10
LOG_FLOOR_VALUE = float(np.log(LOG_FLOOR))

LMS_KINDS = ("clean", "noisy", "enhanced", "converted")


class SignalError(ValueError):
    """Invalid audio or feature input."""


class WavFormatError(SignalError):
    """The WAV file cannot be decoded under the requested policy."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise SignalError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.samples.size == 0:
            raise SignalError("waveform is empty")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    @property
    def power(self) -> float:
        return float(np.mean(self.samples**2))


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # (T, F) complex
    frame_length_samples: int = N_FFT
    hop_samples: int = HOP
    window_kind: str = "hann"

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_bins)
    fmin_hz: float
    fmax_hz: float
    sample_rate_hz: int = SAMPLE_RATE


@dataclass
class LogMelSpectrogram:
    frames: np.ndarray  # (T, 80)
    kind: str = "clean"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise SignalError(f"log-mel must be (T, {N_MELS}), got {self.frames.shape}")
        if self.kind not in LMS_KINDS:
            raise SignalError(f"unknown log-mel kind {self.kind!r}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _as_frames(lms) -> np.ndarray:
    if isinstance(lms, LogMelSpectrogram):
        return lms.frames
    return np.asarray(lms, dtype=np.float64)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def load_wav(path, target_rate: int | None = SAMPLE_RATE, resample: bool = False) -> Waveform:
    """Read a PCM16/PCM32/float WAV file as a mono waveform in [-1, 1].

    Multi-channel files keep their first channel. If ``target_rate`` is set
    and the file rate differs, the audio is resampled only when ``resample``
    is true; otherwise :class:`WavFormatError` is raised.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise WavFormatError(f"cannot decode {path}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"unsupported sample encoding {data.dtype} in {path}")

    if samples.ndim == 2:
        samples = samples[:, 0]
    if samples.size == 0:
        raise WavFormatError(f"{path} contains no audio")

    if target_rate is not None and rate != target_rate:
        if not resample:
            raise WavFormatError(f"{path} is {rate} Hz, expected {target_rate} Hz (pass resample=True)")
        g = np.gcd(int(rate), int(target_rate))
        samples = resample_poly(samples, target_rate // g, rate // g)
        rate = target_rate
    return Waveform(np.clip(samples, -1.0, 1.0), int(rate))


def save_wav(path, wave: Waveform, encoding: str = "pcm16") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.clip(wave.samples, -1.0, 1.0)
    if encoding == "pcm16":
        data = np.round(x * 32767.0).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise WavFormatError(f"unsupported encoding {encoding!r}")
    wavfile.write(path, wave.sample_rate_hz, data)
    return path


# ---------------------------------------------------------------------------
# noise mixing
# ---------------------------------------------------------------------------


def fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    """Loop or crop ``noise`` to exactly ``n`` samples."""
    return np.resize(noise, n) if noise.size < n else noise[:n].copy()


def measure_snr_db(clean: np.ndarray, noise_component: np.ndarray) -> float:
    return float(10.0 * np.log10(np.mean(clean**2) / np.mean(noise_component**2)))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Add ``noise`` to ``clean`` scaled so the full-utterance SNR equals ``snr_db``.

    The mixture is not normalized. If it would clip, the whole mixture is
    scaled down (SNR is unchanged) and the gain is stored in ``meta``.
    """
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise SignalError("clean and noise sample rates differ")
    n = fit_length(noise.samples, clean.samples.size)
    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(n**2))
    if p_noise <= 0.0:
        raise SignalError("noise has zero power over the clean span")
    if p_clean <= 0.0:
        raise SignalError("clean signal has zero power")
    alpha = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixture = clean.samples + alpha * n
    peak = float(np.max(np.abs(mixture)))
    gain = 1.0
    if peak > 1.0:
        gain = 1.0 / peak
        mixture = mixture * gain
    meta = {"snr_db": float(snr_db), "noise_gain": float(alpha), "clip_gain": gain}
    return Waveform(mixture, clean.sample_rate_hz, meta)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def hann_window(n: int) -> np.ndarray:
    # periodic Hann, constant-overlap-add at hop n/4
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def n_frames_for(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    return 1 + (n_samples + 2 * (n_fft // 2) - n_fft) // hop


def stft(wave, n_fft: int = N_FFT, hop: int = HOP) -> ComplexSpectrogram:
    """Centered STFT: reflect-pad n_fft/2 at both ends, Hann window, one-sided spectrum."""
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    if x.size < n_fft:
        raise SignalError(f"audio has {x.size} samples, at least {n_fft} are required")
    pad = n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (padded.size - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    spec = np.fft.rfft(frames * hann_window(n_fft), axis=-1)
    return ComplexSpectrogram(spec, n_fft, hop, "hann")


def istft(spec: np.ndarray, n_fft: int = N_FFT, hop: int = HOP, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`stft` by weighted overlap-add; trims the centering pad."""
    frames = np.fft.irfft(spec, n=n_fft, axis=-1)
    y = kernels.overlap_add(np.ascontiguousarray(frames), hann_window(n_fft), hop)
    y = y[n_fft // 2 :]
    if length is None:
        length = hop * (spec.shape[0] - 1)
    y = y[:length] if y.size >= length else np.pad(y, (0, length - y.size))
    return y


# ---------------------------------------------------------------------------
# mel features
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(
    n_mels: int = N_MELS,
    fmin_hz: float = 0.0,
    fmax_hz: float = SAMPLE_RATE / 2,
    n_bins: int = N_FFT // 2 + 1,
    sample_rate_hz: int = SAMPLE_RATE,
) -> MelFilterbank:
    """HTK-mel triangular filters, each row scaled so its peak weight is 1."""
    nyquist = sample_rate_hz / 2
    if not 0.0 <= fmin_hz < fmax_hz:
        raise SignalError(f"need 0 <= fmin < fmax, got fmin={fmin_hz}, fmax={fmax_hz}")
    if fmax_hz > nyquist:
        raise SignalError(f"fmax {fmax_hz} Hz exceeds Nyquist {nyquist} Hz")
    if n_mels < 1 or n_bins < 2:
        raise SignalError("n_mels and n_bins must be positive")

    n_fft = 2 * (n_bins - 1)
    bin_hz = np.arange(n_bins) * sample_rate_hz / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (bin_hz[None, :] - left) / (center - left)
    fall = (right - bin_hz[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rise, fall))

    peaks = weights.max(axis=1)
    empty = np.flatnonzero(peaks <= 0.0)
    if empty.size:
        raise SignalError(
            f"{empty.size} of {n_mels} mel filters cover no FFT bin; reduce n_mels or increase n_bins"
        )
    return MelFilterbank(weights / peaks[:, None], float(fmin_hz), float(fmax_hz), sample_rate_hz)


@lru_cache(maxsize=4)
def default_filterbank() -> MelFilterbank:
    return build_mel_filterbank()


def mel_power(spec: ComplexSpectrogram, fb: MelFilterbank | None = None) -> np.ndarray:
    fb = fb or default_filterbank()
    power = spec.frames.real**2 + spec.frames.imag**2
    return power @ fb.weights.T


def log_mel(wave, fb: MelFilterbank | None = None, kind: str = "clean") -> LogMelSpectrogram:
    """Natural log of floored mel power, shape (T, 80)."""
    energies = mel_power(stft(wave), fb)
    return LogMelSpectrogram(np.log(np.maximum(LOG_FLOOR, energies)), kind)


def mel_to_linear_power(mel: np.ndarray, fb: MelFilterbank, n_iters: int = 100) -> np.ndarray:
    """Nonnegative least-squares estimate of the linear power spectrum.

    Starts from the clamped pseudo-inverse and refines with multiplicative
    updates, which keep every bin nonnegative.
    """
    w = fb.weights
    power = np.maximum(mel @ np.linalg.pinv(w).T, 0.0)
    # multiplicative updates cannot revive exact zeros
    power = np.maximum(power, 1e-3 * (mel @ w) / np.maximum(w.sum(axis=0), 1e-9))
    gram = w.T @ w
    target = mel @ w
    for _ in range(n_iters):
        power *= target / np.maximum(power @ gram, 1e-30)
    return power


def invert_log_mel(lms, n_iters: int = 32, fb: MelFilterbank | None = None, seed: int = 0) -> Waveform:
    """Approximate inversion: NNLS mel to linear power, then ``n_iters`` rounds of Griffin-Lim."""
    if n_iters < 1:
        raise SignalError(f"n_iters must be >= 1, got {n_iters}")
    frames = _as_frames(lms)
    fb = fb or default_filterbank()
    mag = np.sqrt(mel_to_linear_power(np.exp(frames), fb))
    length = HOP * (frames.shape[0] - 1)

    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    y = istft(mag * angles, length=length)
    for _ in range(n_iters):
        rebuilt = stft(np.pad(y, (0, max(0, N_FFT - y.size)))).frames[: mag.shape[0]]
        angles = np.exp(1j * np.angle(rebuilt))
        y = istft(mag * angles, length=length)
    return Waveform(np.clip(y, -1.0, 1.0), fb.sample_rate_hz)
