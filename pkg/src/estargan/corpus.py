"""Paired noisy/clean corpora with speaker labels.

The toy corpus is parallel by construction: every synthetic speaker reads
the same "sentences" (shared syllable, pitch and loudness contours) through
its own formant envelope, so content is shared and identity differs.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import kernels
from .signal import (
    SAMPLE_RATE,
    SignalError,
    Waveform,
    load_wav,
    log_mel,
    mix_at_snr,
    save_wav,
)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
BOTTLENECK_FACTOR = 16

DESK_SPEAKERS = 4
DESK_UTTS_PER_SPEAKER = 40
DESK_TEST_SENTENCES = 8
DESK_TRAIN_NOISES = ("white", "pink", "babble")
DESK_TEST_NOISES = ("engine", "street")
DESK_SNRS_DB = (5.0, 10.0, 15.0)


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# speaker attributes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpeakerAttribute:
    index: int
    n_speakers: int

    def __post_init__(self):
        if self.n_speakers < 2:
            raise CorpusError(f"need at least 2 speakers, got {self.n_speakers}")
        if not 0 <= self.index < self.n_speakers:
            raise CorpusError(f"speaker index {self.index} outside [0, {self.n_speakers})")

    @property
    def vector(self) -> np.ndarray:
        v = np.zeros(self.n_speakers)
        v[self.index] = 1.0
        return v


def speaker_onehot(index: int, n_speakers: int) -> SpeakerAttribute:
    return SpeakerAttribute(int(index), int(n_speakers))


def onehot_matrix(indices: Sequence[int], n_speakers: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= n_speakers):
        raise CorpusError(f"speaker index outside [0, {n_speakers})")
    out = np.zeros((indices.size, n_speakers), dtype=np.float32)
    out[np.arange(indices.size), indices] = 1.0
    return out


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class NoisyRendition:
    noise: str
    snr_db: float
    path: str


@dataclass
class UtteranceRecord:
    utterance_id: str
    speaker: int
    speaker_name: str
    gender: str
    clean_path: str
    text_id: str | None = None
    noisy: list[NoisyRendition] = field(default_factory=list)


@dataclass
class PairedManifest:
    records: list[UtteranceRecord]
    n_speakers: int
    split: str = "train"
    speaker_names: list[str] = field(default_factory=list)
    speaker_genders: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def noise_names(self) -> set[str]:
        return {r.noise for rec in self.records for r in rec.noisy}

    @property
    def n_renditions(self) -> int:
        return sum(len(rec.noisy) for rec in self.records)

    def gender_of(self, speaker: int) -> str:
        return self.speaker_genders[speaker]

    def by_text(self) -> dict[tuple[str, int], UtteranceRecord]:
        return {(rec.text_id, rec.speaker): rec for rec in self.records}

    def with_records(self, records: list[UtteranceRecord], split: str | None = None) -> "PairedManifest":
        return PairedManifest(
            records, self.n_speakers, split or self.split, list(self.speaker_names), list(self.speaker_genders)
        )

    def validate(self) -> None:
        for rec in self.records:
            if not Path(rec.clean_path).is_file():
                raise CorpusError(f"missing clean file for {rec.utterance_id}: {rec.clean_path}")
            for r in rec.noisy:
                if not Path(r.path).is_file():
                    raise CorpusError(f"missing noisy file for {rec.utterance_id}: {r.path}")

    def save(self, path) -> Path:
        """Write one JSON object per line: a header, then one line per utterance."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        header = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "kind": "paired_manifest",
            "split": self.split,
            "n_speakers": self.n_speakers,
            "speaker_names": self.speaker_names,
            "speaker_genders": self.speaker_genders,
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                d = asdict(rec)
                d["clean_path"] = _relpath(rec.clean_path, base)
                for r in d["noisy"]:
                    r["path"] = _relpath(r["path"], base)
                fh.write(json.dumps(d, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "PairedManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such manifest: {path}")
        base = path.parent.resolve()
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise CorpusError(f"{path} is empty")
        header = json.loads(lines[0])
        if header.get("kind") != "paired_manifest":
            raise CorpusError(f"{path} is not a paired manifest")
        if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise CorpusError(
                f"{path} has schema version {header.get('schema_version')}, expected {MANIFEST_SCHEMA_VERSION}"
            )
        records = []
        for ln in lines[1:]:
            d = json.loads(ln)
            noisy = [NoisyRendition(r["noise"], float(r["snr_db"]), str(base / r["path"])) for r in d.pop("noisy")]
            d["clean_path"] = str(base / d["clean_path"])
            records.append(UtteranceRecord(**d, noisy=noisy))
        return cls(
            records,
            int(header["n_speakers"]),
            header["split"],
            list(header.get("speaker_names", [])),
            list(header.get("speaker_genders", [])),
        )


def _relpath(p: str, base: Path) -> str:
    return os.path.relpath(Path(p).resolve(), base)


def check_split_hygiene(train: PairedManifest, test: PairedManifest) -> None:
    shared_noise = train.noise_names & test.noise_names
    if shared_noise:
        raise CorpusError(f"noise types appear in both splits: {sorted(shared_noise)}")
    shared_utts = {r.utterance_id for r in train.records} & {r.utterance_id for r in test.records}
    if shared_utts:
        raise CorpusError(f"{len(shared_utts)} utterance ids appear in both splits, e.g. {sorted(shared_utts)[:3]}")


def split_by_text(manifest: PairedManifest, n_test_texts: int) -> tuple[PairedManifest, PairedManifest]:
    """Hold out the last ``n_test_texts`` sentences (for every speaker) as the test split."""
    texts = sorted({r.text_id for r in manifest.records})
    if not 0 < n_test_texts < len(texts):
        raise CorpusError(f"cannot hold out {n_test_texts} of {len(texts)} sentences")
    test_texts = set(texts[-n_test_texts:])
    train = [r for r in manifest.records if r.text_id not in test_texts]
    test = [r for r in manifest.records if r.text_id in test_texts]
    return manifest.with_records(train, "train"), manifest.with_records(test, "test")


# ---------------------------------------------------------------------------
# toy speakers and sentences
# ---------------------------------------------------------------------------

# F1/F2/F3 multipliers relative to a speaker's neutral formants
_VOWELS = np.array(
    [
        [1.45, 0.80, 0.95],  # a
        [0.55, 1.45, 1.10],  # i
        [0.60, 0.55, 0.90],  # u
        [0.95, 1.20, 1.00],  # e
        [1.00, 0.65, 0.92],  # o
    ]
)


@dataclass(frozen=True)
class SpeakerProfile:
    name: str
    gender: str
    f0_scale: float
    tilt_db_per_octave: float
    formants_hz: tuple[float, float, float]
    bandwidths_hz: tuple[float, float, float]
    formant_gains_db: tuple[float, float, float]
    breathiness: float


@dataclass(frozen=True)
class Sentence:
    text_id: str
    # per-syllable: start_s, dur_s, vowel, f0 start/end in Hz (male reference), peak amplitude
    syllables: tuple[tuple[float, float, int, float, float, float], ...]
    duration_s: float


def make_speaker_profiles(n_speakers: int, rng: np.random.Generator) -> list[SpeakerProfile]:
    profiles = []
    for i in range(n_speakers):
        gender = "M" if i % 2 == 0 else "F"
        scale = 1.0 if gender == "M" else 1.17
        base = np.array([520.0, 1450.0, 2500.0]) * scale * rng.uniform(0.88, 1.12, 3)
        profiles.append(
            SpeakerProfile(
                name=f"spk{i:02d}{gender}",
                gender=gender,
                f0_scale=float((1.0 if gender == "M" else 1.75) * rng.uniform(0.9, 1.1)),
                tilt_db_per_octave=float(rng.uniform(-9.0, -3.0)),
                formants_hz=tuple(float(f) for f in np.sort(base)),
                bandwidths_hz=tuple(float(b) for b in rng.uniform([70, 90, 130], [130, 180, 260])),
                formant_gains_db=tuple(float(g) for g in rng.uniform([18, 12, 8], [26, 22, 18])),
                breathiness=float(rng.uniform(0.01, 0.05)),
            )
        )
    return profiles


def make_sentences(n: int, rng: np.random.Generator) -> list[Sentence]:
    sentences = []
    for k in range(n):
        t = 0.12
        syl = []
        n_syl = int(rng.integers(4, 7))
        base_f0 = rng.uniform(105.0, 135.0)
        for s in range(n_syl):
            dur = float(rng.uniform(0.16, 0.26))
            f0a = base_f0 * rng.uniform(0.9, 1.15) * (1.0 - 0.03 * s)
            f0b = f0a * rng.uniform(0.85, 1.15)
            syl.append((t, dur, int(rng.integers(0, len(_VOWELS))), float(f0a), float(f0b), float(rng.uniform(0.6, 1.0))))
            t += dur + float(rng.uniform(0.02, 0.07))
        sentences.append(Sentence(f"t{k:03d}", tuple(syl), float(t + 0.12)))
    return sentences


def _contours(sentence: Sentence, n: int, sr: int):
    """Per-sample f0 (male reference), amplitude and vowel-blend weights."""
    time = np.arange(n) / sr
    f0 = np.full(n, sentence.syllables[0][3])
    amp = np.zeros(n)
    vowel_w = np.zeros((len(_VOWELS), n))
    centers = []
    for start, dur, vowel, f0a, f0b, peak in sentence.syllables:
        inside = (time >= start) & (time < start + dur)
        u = (time[inside] - start) / dur
        f0[inside] = f0a + (f0b - f0a) * u
        # raised-cosine loudness with a flat top
        env = np.clip(np.minimum(u, 1.0 - u) / 0.25, 0.0, 1.0)
        amp[inside] = peak * (0.5 - 0.5 * np.cos(np.pi * env))
        centers.append((start + dur / 2, vowel))
    # f0 holds its last voiced value through gaps
    held = np.where(amp > 0, np.arange(n), 0)
    f0 = f0[np.maximum.accumulate(held)]
    # vowel identity crossfades between syllable centers
    ctimes = np.array([c[0] for c in centers])
    for idx_v in range(len(_VOWELS)):
        vals = np.array([1.0 if c[1] == idx_v else 0.0 for c in centers])
        vowel_w[idx_v] = np.interp(time, ctimes, vals)
    return f0, amp, vowel_w


def synthesize_utterance(
    profile: SpeakerProfile, sentence: Sentence, rng: np.random.Generator, sr: int = SAMPLE_RATE, rms: float = 0.05
) -> np.ndarray:
    n = int(round(sentence.duration_s * sr))
    f0_ref, amp, vowel_w = _contours(sentence, n, sr)
    f0 = f0_ref * profile.f0_scale
    phase = np.cumsum(2.0 * np.pi * f0 / sr)

    mults = vowel_w.T @ _VOWELS  # (n, 3)
    formants = mults * np.asarray(profile.formants_hz)[None, :]

    nyq_guard = 0.48 * sr
    n_harm = int(nyq_guard // f0.min())
    harm_f = np.arange(1, n_harm + 1)[:, None] * f0[None, :]  # (H, n)
    env_db = profile.tilt_db_per_octave * np.log2(np.maximum(harm_f, 50.0) / 100.0)
    for k in range(3):
        bw = profile.bandwidths_hz[k]
        env_db = env_db + profile.formant_gains_db[k] * np.exp(-0.5 * ((harm_f - formants[None, :, k]) / bw) ** 2)
    amps = 10.0 ** (env_db / 20.0) * (harm_f < nyq_guard) * amp[None, :]
    voiced = kernels.harmonic_synth(np.ascontiguousarray(phase), np.ascontiguousarray(amps))

    breath = rng.standard_normal(n) * amp * profile.breathiness * np.sqrt(np.mean(voiced**2) + 1e-12) * 4.0
    x = voiced + breath
    x *= rms / np.sqrt(np.mean(x**2))
    # quiet-room floor, roughly 60 dB below speech level
    x += rms * 1e-3 * rng.standard_normal(n)
    return x


def make_toy_corpus(
    root,
    n_speakers: int = DESK_SPEAKERS,
    utts_per_speaker: int = DESK_UTTS_PER_SPEAKER,
    seed: int = 0,
) -> PairedManifest:
    """Write ``<root>/<speaker>/<utt>.wav`` for a synthetic parallel corpus (clean only)."""
    if n_speakers < 2:
        raise CorpusError(f"need at least 2 speakers, got {n_speakers}")
    if utts_per_speaker < 1:
        raise CorpusError(f"need at least 1 utterance per speaker, got {utts_per_speaker}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    profiles = make_speaker_profiles(n_speakers, rng)
    sentences = make_sentences(utts_per_speaker, rng)

    records = []
    for spk, prof in enumerate(profiles):
        for sent in sentences:
            # seed per utterance so files do not depend on generation order
            urng = np.random.default_rng([seed, spk, int(sent.text_id[1:])])
            x = synthesize_utterance(prof, sent, urng)
            utt = f"{prof.name}_{sent.text_id}"
            path = save_wav(root / prof.name / f"{utt}.wav", Waveform(x))
            records.append(UtteranceRecord(utt, spk, prof.name, prof.gender, str(path), sent.text_id))
    return PairedManifest(
        records, n_speakers, "all", [p.name for p in profiles], [p.gender for p in profiles]
    )


# ---------------------------------------------------------------------------
# synthetic noises
# ---------------------------------------------------------------------------


def _white(n, rng, sr):
    return rng.standard_normal(n)


def _spectral_shape(n, rng, gain_fn, sr):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    return np.fft.irfft(spec * gain_fn(np.maximum(f, 1.0)), n)


def _pink(n, rng, sr):
    return _spectral_shape(n, rng, lambda f: 1.0 / np.sqrt(f), sr)


def _babble(n, rng, sr):
    profiles = make_speaker_profiles(6, rng)
    out = np.zeros(n)
    for p in profiles:
        pos = 0
        while pos < n:
            (sent,) = make_sentences(1, rng)
            x = synthesize_utterance(p, sent, rng)
            m = min(x.size, n - pos)
            out[pos : pos + m] += x[:m]
            pos += m
    return out


def _engine(n, rng, sr):
    t = np.arange(n) / sr
    f0 = rng.uniform(28.0, 40.0) * (1.0 + 0.05 * np.sin(2 * np.pi * 0.2 * t))
    phase = np.cumsum(2.0 * np.pi * f0 / sr)
    amps = np.stack([np.full(n, 1.0 / (h + 1) ** 0.7) for h in range(40)])
    tone = kernels.harmonic_synth(phase, amps)
    am = 1.0 + 0.6 * np.sin(2 * np.pi * rng.uniform(6.0, 10.0) * t)
    rumble = _spectral_shape(n, rng, lambda f: 1.0 / (1.0 + (f / 300.0) ** 2), sr)
    return tone * am + 0.5 * rumble / np.std(rumble) * np.std(tone)


def _street(n, rng, sr):
    t = np.arange(n) / sr
    base = _spectral_shape(n, rng, lambda f: 1.0 / (1.0 + (f / 1200.0) ** 1.5), sr)
    swell = np.ones(n)
    for _ in range(max(1, int(n / sr / 2))):
        c = rng.uniform(0, n / sr)
        swell += 2.0 * np.exp(-0.5 * ((t - c) / rng.uniform(0.3, 0.8)) ** 2)
    horn_t = rng.uniform(0, n / sr)
    horn = np.sin(2 * np.pi * 420 * t) * np.exp(-0.5 * ((t - horn_t) / 0.15) ** 2) * 2.0 * np.std(base)
    return base * swell + horn


NOISE_GENERATORS = {"white": _white, "pink": _pink, "babble": _babble, "engine": _engine, "street": _street}


def make_noise(name: str, duration_s: float = 10.0, seed: int = 0, sr: int = SAMPLE_RATE) -> Waveform:
    """Synthetic noise of the named type, scaled to unit RMS times 0.1."""
    try:
        gen = NOISE_GENERATORS[name]
    except KeyError:
        raise CorpusError(f"unknown noise type {name!r}; choose from {sorted(NOISE_GENERATORS)}") from None
    name_salt = int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")
    rng = np.random.default_rng([seed, name_salt])
    x = gen(int(duration_s * sr), rng, sr)
    x = 0.1 * x / np.sqrt(np.mean(x**2))
    return Waveform(x, sr)


def synthesize_noisy(
    manifest: PairedManifest,
    noises: Mapping[str, Waveform] | Iterable[tuple[str, Waveform]],
    snrs_db: Sequence[float],
    seed: int,
    out_root,
    forbidden_noise_names: Iterable[str] = (),
) -> PairedManifest:
    """Mix every clean utterance with every noise at every SNR.

    Files land at ``<out_root>/<noise>/<snr>/<speaker>/<utt>.wav``. A noise
    name listed in ``forbidden_noise_names`` (the other split's noises) is an
    error, which keeps training and test noise types disjoint.
    """
    noises = list(noises.items()) if isinstance(noises, Mapping) else list(noises)
    if not noises:
        raise CorpusError("noise list is empty")
    if not snrs_db:
        raise CorpusError("SNR list is empty")
    clash = {name for name, _ in noises} & set(forbidden_noise_names)
    if clash:
        raise CorpusError(f"noise names declared for both splits: {sorted(clash)}")
    for name, w in noises:
        if not np.any(w.samples):
            raise CorpusError(f"noise {name!r} is silent")

    out_root = Path(out_root)
    records = []
    for rec in manifest.records:
        clean = load_wav(rec.clean_path)
        noisy = list(rec.noisy)
        for ni, (name, noise) in enumerate(noises):
            for snr in snrs_db:
                rng = np.random.default_rng([seed, ni, int(round(snr * 100)) + 10000, _stable_hash(rec.utterance_id)])
                offset = int(rng.integers(0, noise.samples.size))
                shifted = Waveform(np.roll(noise.samples, -offset), noise.sample_rate_hz)
                mixed = mix_at_snr(clean, shifted, snr)
                if mixed.meta["clip_gain"] != 1.0:
                    logger.warning("%s at %s dB with %s was scaled by %.3f to avoid clipping",
                                   rec.utterance_id, snr, name, mixed.meta["clip_gain"])
                path = out_root / name / _snr_dir(snr) / rec.speaker_name / f"{rec.utterance_id}.wav"
                save_wav(path, mixed)
                noisy.append(NoisyRendition(name, float(snr), str(path)))
        records.append(
            UtteranceRecord(rec.utterance_id, rec.speaker, rec.speaker_name, rec.gender, rec.clean_path, rec.text_id, noisy)
        )
    return manifest.with_records(records)


def _snr_dir(snr: float) -> str:
    return f"{snr:g}dB"


def _stable_hash(s: str) -> int:
    h = 2166136261
    for ch in s.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


@dataclass
class ToyCorpus:
    train: PairedManifest
    test: PairedManifest
    train_path: Path
    test_path: Path


def build_desk_corpus(
    root,
    seed: int = 0,
    n_speakers: int = DESK_SPEAKERS,
    utts_per_speaker: int = DESK_UTTS_PER_SPEAKER,
    n_test_texts: int = DESK_TEST_SENTENCES,
    train_noises: Sequence[str] = DESK_TRAIN_NOISES,
    test_noises: Sequence[str] = DESK_TEST_NOISES,
    snrs_db: Sequence[float] = DESK_SNRS_DB,
) -> ToyCorpus:
    """Toy corpus, train/test split by sentence, disjoint noise types, manifests on disk."""
    root = Path(root)
    clean_root = root / "clean"
    full = make_toy_corpus(clean_root, n_speakers, utts_per_speaker, seed)
    train, test = split_by_text(full, n_test_texts)
    train_n = {name: make_noise(name, seed=seed) for name in train_noises}
    test_n = {name: make_noise(name, seed=seed + 1) for name in test_noises}
    noisy_root = root / "clean_noisy"
    train = synthesize_noisy(train, train_n, snrs_db, seed, noisy_root, forbidden_noise_names=test_noises)
    test = synthesize_noisy(test, test_n, snrs_db, seed + 1, noisy_root, forbidden_noise_names=train_noises)
    check_split_hygiene(train, test)
    return ToyCorpus(train, test, train.save(root / "train.jsonl"), test.save(root / "test.jsonl"))


# ---------------------------------------------------------------------------
# features and batches
# ---------------------------------------------------------------------------


class FeatureStore:
    """Caches log-mel features per WAV path."""

    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, path: str) -> np.ndarray:
        feats = self._cache.get(path)
        if feats is None:
            feats = log_mel(load_wav(path)).frames.astype(np.float32)
            self._cache[path] = feats
        return feats

    def __len__(self) -> int:
        return len(self._cache)


@dataclass
class TrainingBatch:
    noisy: np.ndarray  # (B, L, 80)
    clean: np.ndarray  # (B, L, 80)
    src: np.ndarray  # (B, K) one-hot
    tgt: np.ndarray  # (B, K) one-hot
    src_idx: np.ndarray
    tgt_idx: np.ndarray


class BatchStream:
    """Seeded infinite iterator of aligned noisy/clean crops.

    ``clean_only=True`` uses the clean crop in place of a noisy rendition,
    for stages trained on clean speech.
    """

    def __init__(
        self,
        manifest: PairedManifest,
        crop_frames: int,
        batch_size: int,
        seed: int,
        features: FeatureStore | None = None,
        clean_only: bool = False,
    ):
        if crop_frames <= 0 or crop_frames % BOTTLENECK_FACTOR:
            raise CorpusError(f"crop_frames must be a positive multiple of {BOTTLENECK_FACTOR}, got {crop_frames}")
        if batch_size < 1:
            raise CorpusError("batch_size must be >= 1")
        self.manifest = manifest
        self.crop_frames = crop_frames
        self.batch_size = batch_size
        self.clean_only = clean_only
        self.features = features or FeatureStore()
        self.rng = np.random.default_rng(seed)

        self.eligible: list[UtteranceRecord] = []
        self.skipped = 0
        for rec in manifest.records:
            if not clean_only and not rec.noisy:
                self.skipped += 1
                continue
            if self.features(rec.clean_path).shape[0] < crop_frames:
                self.skipped += 1
                continue
            self.eligible.append(rec)
        if self.skipped:
            logger.warning("skipped %d utterances shorter than %d frames or without renditions", self.skipped, crop_frames)
        if not self.eligible:
            raise CorpusError("no eligible utterance for batch sampling")

    def __iter__(self) -> Iterator[TrainingBatch]:
        return self

    def __next__(self) -> TrainingBatch:
        k = self.manifest.n_speakers
        L = self.crop_frames
        noisy = np.empty((self.batch_size, L, 80), dtype=np.float32)
        clean = np.empty_like(noisy)
        src = np.empty(self.batch_size, dtype=np.int64)
        for b in range(self.batch_size):
            rec = self.eligible[int(self.rng.integers(len(self.eligible)))]
            y = self.features(rec.clean_path)
            if self.clean_only:
                x = y
            else:
                x = self.features(rec.noisy[int(self.rng.integers(len(rec.noisy)))].path)
            n = min(x.shape[0], y.shape[0])
            off = int(self.rng.integers(0, n - L + 1))
            noisy[b] = x[off : off + L]
            clean[b] = y[off : off + L]
            src[b] = rec.speaker
        tgt = self.rng.integers(0, k, size=self.batch_size)
        return TrainingBatch(noisy, clean, onehot_matrix(src, k), onehot_matrix(tgt, k), src, tgt)

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def sample_batches(
    manifest: PairedManifest,
    crop_frames: int,
    batch_size: int,
    seed: int,
    features: FeatureStore | None = None,
    clean_only: bool = False,
) -> BatchStream:
    return BatchStream(manifest, crop_frames, batch_size, seed, features, clean_only)


def feature_stats(manifest: PairedManifest, features: FeatureStore) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin mean and std of clean log-mel frames."""
    frames = np.concatenate([features(r.clean_path) for r in manifest.records], axis=0).astype(np.float64)
    return frames.mean(axis=0), np.maximum(frames.std(axis=0), 1e-3)


def measure_rendition_snr(record: UtteranceRecord, rendition: NoisyRendition) -> float:
    """Re-measured SNR of a rendition on disk."""
    clean = load_wav(record.clean_path).samples
    noisy = load_wav(rendition.path).samples
    if clean.size != noisy.size:
        raise SignalError("clean and noisy renditions differ in length")
    return float(10.0 * np.log10(np.mean(clean**2) / np.mean((noisy - clean) ** 2)))
