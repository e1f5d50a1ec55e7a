"""Objective evaluation: mel-cepstral distortion over DTW-aligned frames, reports and plots."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.fft import dct, idct

from . import kernels
from .corpus import FeatureStore, PairedManifest, onehot_matrix
from .signal import N_MELS, _as_frames

MCD_ORDER = 24
MCD_SCALE = 10.0 / np.log(10.0)
DIRECTIONS = ("M2M", "F2F", "M2F", "F2M")

# Full-scale reference results (TMHINT, 8 speakers), kept as context in report footers only.
REFERENCE_MCD_BY_DIRECTION = {
    "autovc": {"M2M": 9.43, "F2F": 9.70, "M2F": 10.03, "F2M": 9.48, "Avg": 9.66},
    "se_vc": {"M2M": 9.45, "F2F": 9.71, "M2F": 9.75, "F2M": 9.56, "Avg": 9.62},
    "jt_se_vc": {"M2M": 7.74, "F2F": 7.95, "M2F": 8.17, "F2M": 8.35, "Avg": 8.05},
    "estargan": {"M2M": 7.48, "F2F": 7.83, "M2F": 7.92, "F2M": 8.17, "Avg": 7.85},
}
REFERENCE_MCD_BY_NOISE = {
    "autovc": {"engine": 9.55, "pink": 9.66, "white": 9.79, "street": 9.63},
    "se_vc": {"engine": 9.61, "pink": 9.62, "white": 9.63, "street": 9.62},
    "jt_se_vc": {"engine": 8.03, "pink": 8.05, "white": 8.08, "street": 8.05},
    "estargan": {"engine": 7.83, "pink": 7.84, "white": 7.88, "street": 7.86},
}
VARIANT_LABELS = {"autovc": "AutoVC", "se_vc": "SE+VC", "jt_se_vc": "jt-SE+VC", "estargan": "EStarGAN",
                  "unconverted": "Unconverted"}


class EvaluationError(ValueError):
    pass


@dataclass
class MelCepstra:
    frames: np.ndarray  # (T, order + 1); column 0 is energy

    @property
    def order(self) -> int:
        return self.frames.shape[1] - 1


def mel_cepstra(lms, order: int = MCD_ORDER) -> MelCepstra:
    """Orthonormal DCT-II of each log-mel frame, coefficients 0..order."""
    frames = _as_frames(lms)
    if not 0 <= order < frames.shape[-1]:
        raise EvaluationError(f"order must be in [0, {frames.shape[-1] - 1}], got {order}")
    return MelCepstra(dct(frames, type=2, norm="ortho", axis=-1)[:, : order + 1])


def inverse_mel_cepstra(cep: MelCepstra, n_mels: int = N_MELS) -> np.ndarray:
    """Inverse DCT, zero-filling truncated coefficients."""
    full = np.zeros((cep.frames.shape[0], n_mels))
    full[:, : cep.frames.shape[1]] = cep.frames
    return idct(full, type=2, norm="ortho", axis=-1)


def _cepstral_block(c) -> np.ndarray:
    frames = c.frames if isinstance(c, MelCepstra) else np.asarray(c, dtype=np.float64)
    return np.ascontiguousarray(frames[:, 1:], dtype=np.float64)


def dtw_align(a, b) -> tuple[np.ndarray, float]:
    """DTW over coefficients 1..D with Euclidean local cost; returns (path (N, 2), total cost)."""
    xa, xb = _cepstral_block(a), _cepstral_block(b)
    if xa.shape[0] == 0 or xb.shape[0] == 0:
        raise EvaluationError("cannot align an empty sequence")
    cost = kernels.pairwise_euclidean(xa, xb)
    acc = kernels.dtw_accumulate(cost)
    path = kernels.dtw_backtrack(acc)
    return path, float(acc[-1, -1])


def mcd(a: MelCepstra, b: MelCepstra) -> float:
    """Mean mel-cepstral distortion in dB over the DTW path, energy coefficient excluded."""
    if a.order != b.order:
        raise EvaluationError(f"cepstral orders differ: {a.order} vs {b.order}")
    path, _ = dtw_align(a, b)
    diff = a.frames[path[:, 0], 1:] - b.frames[path[:, 1], 1:]
    return float(np.mean(MCD_SCALE * np.sqrt(2.0 * np.sum(diff**2, axis=1))))


# ---------------------------------------------------------------------------
# conversion
# ---------------------------------------------------------------------------


def pad_to_multiple(frames: np.ndarray, multiple: int = 16) -> np.ndarray:
    extra = (-frames.shape[0]) % multiple
    return np.pad(frames, ((0, extra), (0, 0)), mode="edge") if extra else frames


Converter = Callable[[np.ndarray, int, Sequence[int]], np.ndarray]


def make_converter(networks) -> Converter:
    """Batch converter ``(lms, src, targets) -> (len(targets), T, 80)`` for a trained system."""
    nets = networks.build() if hasattr(networks, "build") else networks
    nets.eval()
    G = nets.generator(use_se=nets.se is not None)
    K = nets.cfg.n_speakers

    def convert(lms: np.ndarray, src: int, targets: Sequence[int]) -> np.ndarray:
        T = lms.shape[0]
        x = torch.from_numpy(pad_to_multiple(lms.astype(np.float32)))
        n = len(targets)
        xb = x.unsqueeze(0).expand(n, -1, -1).contiguous()
        s = torch.from_numpy(onehot_matrix([src] * n, K))
        t = torch.from_numpy(onehot_matrix(list(targets), K))
        with torch.no_grad():
            out = G(xb, s, t)
        return out[:, :T].double().numpy()

    return convert


def unconverted(lms: np.ndarray, src: int, targets: Sequence[int]) -> np.ndarray:
    """Baseline converter: the noisy source itself."""
    return np.repeat(lms[None].astype(np.float64), len(targets), axis=0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    variant: str
    order: int
    pairs: list[dict] = field(default_factory=list)

    def _group(self, key: str) -> dict[str, list[float]]:
        g: dict[str, list[float]] = defaultdict(list)
        for p in self.pairs:
            g[p[key]].append(p["mcd"])
        return g

    @property
    def by_direction(self) -> dict[str, float]:
        g = self._group("direction")
        return {d: float(np.mean(g[d])) for d in DIRECTIONS if d in g}

    @property
    def by_noise(self) -> dict[str, float]:
        g = self._group("noise")
        return {n: float(np.mean(v)) for n, v in sorted(g.items())}

    @property
    def counts(self) -> dict[str, int]:
        c = {f"direction:{k}": len(v) for k, v in self._group("direction").items()}
        c.update({f"noise:{k}": len(v) for k, v in self._group("noise").items()})
        c["total"] = len(self.pairs)
        return c

    @property
    def mean(self) -> float:
        return float(np.mean([p["mcd"] for p in self.pairs]))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "mcd_order": self.order,
            "mean": self.mean,
            "by_direction": self.by_direction,
            "by_noise": self.by_noise,
            "counts": self.counts,
            "pairs": self.pairs,
            "reference_full_scale": {
                "by_direction": REFERENCE_MCD_BY_DIRECTION.get(self.variant),
                "by_noise": REFERENCE_MCD_BY_NOISE.get(self.variant),
                "binding": False,
            },
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(d["variant"], d["mcd_order"], d["pairs"])


def evaluate_converter(convert: Converter, test: PairedManifest, features: FeatureStore | None = None,
                       variant: str = "custom", order: int = MCD_ORDER) -> EvalReport:
    """Convert every noisy test rendition to every other speaker; MCD against that speaker's clean take."""
    features = features or FeatureStore()
    targets = test.by_text()
    report = EvalReport(variant, order)
    for rec in test.records:
        others = [k for k in range(test.n_speakers) if k != rec.speaker]
        missing = [k for k in others if (rec.text_id, k) not in targets]
        if missing:
            raise EvaluationError(f"no parallel rendition of {rec.text_id} for speakers {missing}")
        ref_ceps = {k: mel_cepstra(features(targets[(rec.text_id, k)].clean_path), order) for k in others}
        for rend in rec.noisy:
            converted = convert(features(rend.path), rec.speaker, others)
            for out, k in zip(converted, others):
                report.pairs.append({
                    "source": rec.utterance_id,
                    "source_speaker": rec.speaker,
                    "target_speaker": k,
                    "direction": f"{test.gender_of(rec.speaker)}2{test.gender_of(k)}",
                    "noise": rend.noise,
                    "snr_db": rend.snr_db,
                    "mcd": mcd(mel_cepstra(out, order), ref_ceps[k]),
                })
    if not report.pairs:
        raise EvaluationError("test manifest has no noisy renditions to evaluate")
    return report


def evaluate_variant(checkpoint, test: PairedManifest, features: FeatureStore | None = None,
                     variant: str | None = None, order: int = MCD_ORDER) -> EvalReport:
    name = variant or getattr(checkpoint, "variant", None) or "custom"
    return evaluate_converter(make_converter(checkpoint), test, features, name, order)


def _fmt_row(label: str, values: Sequence[float | None], width: int = 9) -> str:
    cells = "".join(f"{v:>{width}.2f}" if v is not None else f"{'-':>{width}}" for v in values)
    return f"{label:>12}{cells}"


def render_tables(reports: Sequence[EvalReport]) -> str:
    """Fixed-width comparison by conversion direction and by noise type."""
    cols = list(DIRECTIONS) + ["Avg."]
    lines = ["MCD (dB) by conversion direction", f"{'':>12}" + "".join(f"{c:>9}" for c in cols)]
    for r in reports:
        d = r.by_direction
        lines.append(_fmt_row(VARIANT_LABELS.get(r.variant, r.variant), [d.get(k) for k in DIRECTIONS] + [r.mean]))
    noises = sorted({n for r in reports for n in r.by_noise})
    lines += ["", "MCD (dB) by noise type", f"{'':>12}" + "".join(f"{n:>9}" for n in noises)]
    for r in reports:
        lines.append(_fmt_row(VARIANT_LABELS.get(r.variant, r.variant), [r.by_noise.get(n) for n in noises]))
    lines += ["", "Full-scale reference (8 speakers, 4 unseen noises; context only, not a target):"]
    for v, ref in REFERENCE_MCD_BY_DIRECTION.items():
        lines.append(_fmt_row(VARIANT_LABELS[v], [ref[k] for k in DIRECTIONS] + [ref["Avg"]]))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# spectrogram images
# ---------------------------------------------------------------------------


def _figure(panels: Sequence[tuple[str, np.ndarray]], vmin: float | None, vmax: float | None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(panels)
    rows, cols = (2, 2) if n == 4 else (n, 1)
    fig, axes = plt.subplots(rows, cols, figsize=(5.0 * cols, 2.6 * rows), squeeze=False)
    db = [MCD_SCALE * _as_frames(l).T for _, l in panels]
    lo = min(float(d.min()) for d in db) if vmin is None else vmin
    hi = max(float(d.max()) for d in db) if vmax is None else vmax
    if hi <= lo:
        hi = lo + 1.0
    for ax, (title, _), d in zip(axes.ravel(), panels, db):
        im = ax.imshow(d, origin="lower", aspect="auto", interpolation="nearest", cmap="magma", vmin=lo, vmax=hi)
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("frame (16 ms hop)")
        ax.set_ylabel("mel bin")
        fig.colorbar(im, ax=ax, label="dB")
    fig.tight_layout()
    return fig


def export_spectrogram(lms, path, title: str = "", vmin: float | None = None, vmax: float | None = None) -> Path:
    """Write a PNG heatmap of one log-mel spectrogram."""
    return _save(_figure([(title, lms)], vmin, vmax), path)


def export_panels(panels: Sequence[tuple[str, np.ndarray]], path) -> Path:
    """Several spectrograms on a shared colour scale; four panels are laid out 2x2 as (a)-(d)."""
    if not panels:
        raise EvaluationError("no panels to draw")
    labelled = [(f"({chr(97 + i)}) {t}", l) for i, (t, l) in enumerate(panels)]
    return _save(_figure(labelled, None, None), path)


def _save(fig, path) -> Path:
    import matplotlib.pyplot as plt

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    except OSError as exc:
        raise EvaluationError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path
