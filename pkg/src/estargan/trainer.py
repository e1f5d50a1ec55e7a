"""Four-stage training schedule, comparison variants and checkpoints.

Stages (each seeded independently from ``TrainConfig.seed`` and its name, so
the same stage produces the same parameters no matter which variant asked
for it):

* ``se``       enhancer pre-training on noisy -> clean pairs
* ``vc_clean`` AutoVC self-reconstruction on clean speech only
* ``joint``    enhancer + AutoVC trained together on the autoencoder loss
* ``gan``      enhancer frozen; discriminator, classifier, AutoVC alternate
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import io
import json
import logging
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import nn

from .adversary import (
    Discriminator,
    LossWeights,
    SpeakerClassifier,
    classifier_objective,
    discriminator_objective,
    generator_objective,
)
from .conversion_model import AutoVC, Generator, autovc_loss_terms
from .corpus import BatchStream, FeatureStore, PairedManifest, TrainingBatch, feature_stats
from .profiles import ModelConfig, get_profile
from .se_model import SpeechEnhancer, se_loss

logger = logging.getLogger(__name__)

VARIANTS = ("autovc", "se_vc", "jt_se_vc", "estargan")
STAGES = ("se", "vc_clean", "joint", "gan")
NETWORK_NAMES = ("se", "autovc", "discriminator", "classifier")

CHECKPOINT_MAGIC = b"ESGCKPT\x00"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class MissingStageError(TrainingError):
    def __init__(self, stage: str, needed_by: str):
        self.stage = stage
        super().__init__(f"{needed_by} needs a checkpoint from stage {stage!r}")


class CheckpointError(RuntimeError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    def __init__(self, fields: dict):
        self.fields = fields
        detail = ", ".join(f"{k}: checkpoint={a!r} expected={b!r}" for k, (a, b) in fields.items())
        super().__init__(f"config hash mismatch in fields [{', '.join(fields)}] ({detail})")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    profile: str = "tiny"
    steps_se: int = 2000
    steps_joint: int = 5000
    steps_gan: int = 2000
    steps_vc: int | None = None  # AutoVC-on-clean steps; defaults to steps_joint
    lambda_auto: float = 1.0
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    lambda_idm: float = 5.0
    lambda_gp: float = 10.0
    # enhancer anchor in the joint stage; 0 gives the bare autoencoder objective, which lets the
    # enhancer drift toward outputs that are trivial to reconstruct
    lambda_se_joint: float = 10.0
    # start the joint stage from the clean-speech AutoVC instead of a fresh one
    joint_from_clean_vc: bool = True
    lr_se: float = 1e-3
    lr_g: float = 1e-3
    lr_d: float = 1e-4
    lr_c: float = 1e-4
    lr_g_gan: float = 1e-4  # generator rate in the adversarial stage, matched to D and C
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    crop_frames: int = 64
    seed: int = 0
    data_workers: int = 0  # 0 = strictly sequential loading

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for k in ("steps_se", "steps_joint", "steps_gan"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        for k in ("lr_se", "lr_g", "lr_d", "lr_c", "lr_g_gan"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be > 0")
        if self.steps_vc is not None and self.steps_vc < 0:
            raise ValueError("steps_vc must be >= 0")
        for k in ("lambda_auto", "lambda_cls", "lambda_cyc", "lambda_idm", "lambda_gp", "lambda_se_joint"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.crop_frames <= 0 or self.crop_frames % 16:
            raise ValueError(f"crop_frames must be a positive multiple of 16, got {self.crop_frames}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def vc_steps(self) -> int:
        return self.steps_joint if self.steps_vc is None else self.steps_vc

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cls, self.lambda_cyc, self.lambda_idm, self.lambda_gp)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def paper_schedule(cls, **overrides) -> "TrainConfig":
        """Published step counts (iterations), learning rates and the bare joint objective at full model size."""
        base = dict(profile="paper", steps_se=220_000, steps_joint=905_000, steps_gan=380_000,
                    lr_se=1e-4, lr_g=1e-4, lr_d=1e-4, lr_c=1e-4, lr_g_gan=1e-4, lambda_se_joint=0.0,
                    joint_from_clean_vc=False)
        base.update(overrides)
        return cls(**base)

    def model_config(self, n_speakers: int) -> ModelConfig:
        return get_profile(self.profile, n_speakers)


def _stage_seed(seed: int, stage: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{stage}".encode()).digest()[:4], "little")


def manifest_fingerprint(manifest: PairedManifest) -> str:
    h = hashlib.sha256()
    for rec in manifest.records:
        h.update(f"{rec.utterance_id}|{rec.speaker}|{Path(rec.clean_path).name}".encode())
        for r in rec.noisy:
            h.update(f"|{r.noise}|{r.snr_db}".encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def append(self, stage: str, step: int, losses: dict, t0: float) -> None:
        rec = {"stage": stage, "step": step, "wall_time": time.perf_counter() - t0}
        rec.update({k: float(v) for k, v in losses.items()})
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def stage(self, name: str) -> list[dict]:
        return [r for r in self.records if r["stage"] == name]

    def losses(self) -> list[dict]:
        """Records without wall-clock fields, for reproducibility comparisons."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TrainingLog":
        with open(path) as fh:
            return cls([json.loads(ln) for ln in fh if ln.strip()])


# ---------------------------------------------------------------------------
# networks and checkpoints
# ---------------------------------------------------------------------------


class Networks:
    """The trainable modules of one system; absent networks are ``None``."""

    def __init__(self, cfg: ModelConfig, se=None, autovc=None, discriminator=None, classifier=None):
        self.cfg = cfg
        self.se: SpeechEnhancer | None = se
        self.autovc: AutoVC | None = autovc
        self.discriminator: Discriminator | None = discriminator
        self.classifier: SpeakerClassifier | None = classifier

    @classmethod
    def fresh(cls, cfg: ModelConfig, seed: int, stats: tuple[np.ndarray, np.ndarray] | None = None) -> "Networks":
        torch.manual_seed(_stage_seed(seed, "init"))
        nets = cls(cfg, SpeechEnhancer(cfg), AutoVC(cfg), Discriminator(cfg), SpeakerClassifier(cfg))
        if stats is not None:
            for m in nets.modules().values():
                for sub in m.modules():
                    if hasattr(sub, "set_stats"):
                        sub.set_stats(*stats)
        return nets

    def modules(self) -> dict[str, nn.Module]:
        return {n: getattr(self, n) for n in NETWORK_NAMES if getattr(self, n) is not None}

    def generator(self, use_se: bool = True) -> Generator:
        if self.autovc is None:
            raise TrainingError("system has no AutoVC network")
        return Generator(self.autovc, self.se if use_se else None)

    def state(self) -> dict[str, dict[str, torch.Tensor]]:
        return {n: {k: v.detach().clone() for k, v in m.state_dict().items()} for n, m in self.modules().items()}

    def eval(self) -> "Networks":
        for m in self.modules().values():
            m.eval()
        return self

    def train(self) -> "Networks":
        for m in self.modules().values():
            m.train()
        return self


_BUILDERS = {"se": SpeechEnhancer, "autovc": AutoVC, "discriminator": Discriminator, "classifier": SpeakerClassifier}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: dict
    networks: dict[str, dict[str, torch.Tensor]]
    stage: str
    step: int
    variant: str | None = None
    lineage: list[dict] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.model_config.config_hash()

    def build(self) -> Networks:
        nets = Networks(self.model_config)
        for name, state in self.networks.items():
            module = _BUILDERS[name](self.model_config)
            module.load_state_dict(state)
            setattr(nets, name, module)
        return nets.eval()

    def has(self, name: str) -> bool:
        return name in self.networks


def _make_checkpoint(nets: Networks, cfg: TrainConfig, stage: str, step: int, lineage: list[dict],
                     variant: str | None = None, rng_state: dict | None = None) -> Checkpoint:
    return Checkpoint(nets.cfg, cfg.to_dict(), nets.state(), stage, step, variant, lineage, rng_state or {})


def _serialize(ck: Checkpoint) -> bytes:
    blob = io.BytesIO()
    tensors = []
    for net, state in ck.networks.items():
        for name, t in state.items():
            arr = t.detach().cpu().contiguous().numpy()
            tensors.append({"net": net, "name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                            "offset": blob.tell(), "nbytes": arr.nbytes})
            blob.write(arr.tobytes())
    data = blob.getvalue()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": ck.config_hash,
        "model_config": ck.model_config.to_dict(),
        "train_config": ck.train_config,
        "stage": ck.stage,
        "step": ck.step,
        "variant": ck.variant,
        "lineage": ck.lineage,
        "rng_state": ck.rng_state,
        "tensors": tensors,
        "blob_len": len(data),
        "blob_sha256": hashlib.sha256(data).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + data


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_serialize(ck))
    tmp.replace(path)
    return path


def _diff_fields(saved: dict, expected: dict, prefix: str = "") -> dict:
    out = {}
    for k in sorted(set(saved) | set(expected)):
        a, b = saved.get(k), expected.get(k)
        if a != b:
            out[prefix + k] = (a, b)
    return out


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` set, refuse one built for another architecture."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    head = len(CHECKPOINT_MAGIC) + 12
    if len(raw) < head or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path} is not a checkpoint (bad magic or truncated header)")
    version, hlen = struct.unpack("<IQ", raw[len(CHECKPOINT_MAGIC) : head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointCorruptError(f"{path} has container version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < head + hlen:
        raise CheckpointCorruptError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[head : head + hlen])
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path} has an unreadable header: {exc}") from exc
    data = raw[head + hlen :]
    if len(data) != header["blob_len"]:
        raise CheckpointCorruptError(f"{path} is truncated: {len(data)} of {header['blob_len']} tensor bytes present")
    if hashlib.sha256(data).hexdigest() != header["blob_sha256"]:
        raise CheckpointCorruptError(f"{path} tensor data fails its checksum")

    model_config = ModelConfig.from_dict(header["model_config"])
    if model_config.config_hash() != header["config_hash"]:
        raise CheckpointCorruptError(f"{path} header config does not match its recorded hash")
    if expected is not None and expected.config_hash() != header["config_hash"]:
        raise CheckpointMismatchError(_diff_fields(header["model_config"], expected.to_dict()))

    networks: dict[str, dict[str, torch.Tensor]] = {}
    for t in header["tensors"]:
        arr = np.frombuffer(data, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"])
        networks.setdefault(t["net"], {})[t["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(model_config, header["train_config"], networks, header["stage"], header["step"],
                      header["variant"], header["lineage"], header["rng_state"])


# ---------------------------------------------------------------------------
# batch feeding
# ---------------------------------------------------------------------------


def _to_torch(batch: TrainingBatch) -> dict[str, torch.Tensor]:
    return {
        "x": torch.from_numpy(batch.noisy),
        "y": torch.from_numpy(batch.clean),
        "src": torch.from_numpy(batch.src),
        "tgt": torch.from_numpy(batch.tgt),
        "src_idx": torch.from_numpy(batch.src_idx),
        "tgt_idx": torch.from_numpy(batch.tgt_idx),
    }


def _batches(stream: BatchStream, n: int, workers: int) -> Iterator[dict[str, torch.Tensor]]:
    if workers <= 0:
        for _ in range(n):
            yield _to_torch(next(stream))
        return
    # single producer thread keeps the sampled sequence identical to sequential mode
    q: queue.Queue = queue.Queue(maxsize=4 * workers)

    def produce():
        for _ in range(n):
            q.put(_to_torch(next(stream)))

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    for _ in range(n):
        yield q.get()
    th.join()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


@dataclass
class StageContext:
    cfg: TrainConfig
    manifest: PairedManifest
    features: FeatureStore
    log: TrainingLog

    @classmethod
    def create(cls, cfg, manifest, features=None, log=None) -> "StageContext":
        if manifest is None or len(manifest) == 0:
            raise TrainingError("training manifest is empty")
        return cls(cfg, manifest, features or FeatureStore(), log if log is not None else TrainingLog())

    def fresh_networks(self) -> Networks:
        mcfg = self.cfg.model_config(self.manifest.n_speakers)
        stats = feature_stats(self.manifest, self.features)
        return Networks.fresh(mcfg, self.cfg.seed, stats)

    def stream(self, stage: str, clean_only: bool = False) -> BatchStream:
        return BatchStream(self.manifest, self.cfg.crop_frames, self.cfg.batch_size,
                           _stage_seed(self.cfg.seed, stage + ":data"), self.features, clean_only)


def _lineage_entry(ctx: StageContext, stage: str, steps: int) -> dict:
    return {"stage": stage, "steps": steps, "data": manifest_fingerprint(ctx.manifest),
            "config": ctx.cfg.model_config(ctx.manifest.n_speakers).config_hash(), "seed": ctx.cfg.seed}


def _check_finite(loss: torch.Tensor, stage: str, step: int) -> None:
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss in stage {stage!r} at step {step}")


def stage_pretrain_se(cfg: TrainConfig, manifest: PairedManifest, features: FeatureStore | None = None,
                      log: TrainingLog | None = None, warm: Checkpoint | None = None) -> Checkpoint:
    """Minimize the enhancer MSE on noisy -> clean log-mel pairs."""
    ctx = StageContext.create(cfg, manifest, features, log)
    nets = ctx.fresh_networks()
    base_step, lineage = 0, []
    if warm is not None:
        nets.se.load_state_dict(warm.networks["se"])
        base_step, lineage = warm.step, list(warm.lineage)
    torch.manual_seed(_stage_seed(cfg.seed, "se"))
    stream = ctx.stream("se")
    se = nets.se.train()
    opt = torch.optim.Adam(se.parameters(), lr=cfg.lr_se, betas=cfg.betas)
    t0 = time.perf_counter()
    for i, b in enumerate(_batches(stream, cfg.steps_se, cfg.data_workers)):
        opt.zero_grad()
        loss = se_loss(se(b["x"]), b["y"])
        _check_finite(loss, "se", i)
        loss.backward()
        opt.step()
        ctx.log.append("se", base_step + i + 1, {"se": loss.item()}, t0)
    keep = Networks(nets.cfg, se=nets.se)
    return _make_checkpoint(keep, cfg, "se", base_step + cfg.steps_se,
                            lineage + [_lineage_entry(ctx, "se", cfg.steps_se)], rng_state=stream.get_state())


def _autovc_step_terms(autovc: AutoVC, enhanced: torch.Tensor, src: torch.Tensor, lambda_auto: float):
    t = autovc_loss_terms(enhanced, src, autovc)
    total = t["rec_raw"] + t["rec_post"] + lambda_auto * t["content"]
    return total, t


def stage_train_vc_clean(cfg: TrainConfig, manifest: PairedManifest, features: FeatureStore | None = None,
                         log: TrainingLog | None = None) -> Checkpoint:
    """AutoVC alone, self-reconstruction of clean speech (the enhanced input replaced by clean)."""
    ctx = StageContext.create(cfg, manifest, features, log)
    nets = ctx.fresh_networks()
    torch.manual_seed(_stage_seed(cfg.seed, "vc_clean"))
    stream = ctx.stream("vc_clean", clean_only=True)
    autovc = nets.autovc.train()
    opt = torch.optim.Adam(autovc.parameters(), lr=cfg.lr_g, betas=cfg.betas)
    t0 = time.perf_counter()
    for i, b in enumerate(_batches(stream, cfg.vc_steps, cfg.data_workers)):
        opt.zero_grad()
        loss, terms = _autovc_step_terms(autovc, b["y"], b["src"], cfg.lambda_auto)
        _check_finite(loss, "vc_clean", i)
        loss.backward()
        opt.step()
        ctx.log.append("vc_clean", i + 1, {"auto": loss.item(), **{k: v.item() for k, v in terms.items()}}, t0)
    keep = Networks(nets.cfg, autovc=nets.autovc)
    return _make_checkpoint(keep, cfg, "vc_clean", cfg.vc_steps,
                            [_lineage_entry(ctx, "vc_clean", cfg.vc_steps)], rng_state=stream.get_state())


def stage_joint_se_vc(cfg: TrainConfig, manifest: PairedManifest, warm: Checkpoint,
                      features: FeatureStore | None = None, log: TrainingLog | None = None,
                      vc_warm: Checkpoint | None = None) -> Checkpoint:
    """Cascade the pre-trained enhancer into AutoVC and train both on the autoencoder loss.

    AutoVC starts fresh, or from ``vc_warm`` when ``cfg.joint_from_clean_vc``
    is set. The logged ``auto`` value is the full minimized objective
    (autoencoder terms plus the weighted enhancer anchor).
    """
    if warm is None or not warm.has("se"):
        raise MissingStageError("se", "joint SE+VC training")
    if cfg.joint_from_clean_vc and (vc_warm is None or not vc_warm.has("autovc")):
        raise MissingStageError("vc_clean", "joint SE+VC training from the clean AutoVC")
    ctx = StageContext.create(cfg, manifest, features, log)
    nets = ctx.fresh_networks()
    nets.se.load_state_dict(warm.networks["se"])
    base_step, lineage = warm.step, list(warm.lineage)
    if cfg.joint_from_clean_vc:
        nets.autovc.load_state_dict(vc_warm.networks["autovc"])
        base_step, lineage = base_step + vc_warm.step, lineage + list(vc_warm.lineage)
    torch.manual_seed(_stage_seed(cfg.seed, "joint"))
    stream = ctx.stream("joint")
    se, autovc = nets.se.train(), nets.autovc.train()
    opt = torch.optim.Adam(
        [{"params": se.parameters(), "lr": cfg.lr_se}, {"params": autovc.parameters(), "lr": cfg.lr_g}],
        betas=cfg.betas,
    )
    t0 = time.perf_counter()
    for i, b in enumerate(_batches(stream, cfg.steps_joint, cfg.data_workers)):
        opt.zero_grad()
        enhanced = se(b["x"])
        loss, terms = _autovc_step_terms(autovc, enhanced, b["src"], cfg.lambda_auto)
        terms["se"] = se_loss(enhanced, b["y"])
        loss = loss + cfg.lambda_se_joint * terms["se"]
        _check_finite(loss, "joint", i)
        loss.backward()
        opt.step()
        ctx.log.append("joint", base_step + i + 1, {"auto": loss.item(), **{k: v.item() for k, v in terms.items()}}, t0)
    keep = Networks(nets.cfg, se=nets.se, autovc=nets.autovc)
    return _make_checkpoint(keep, cfg, "joint", base_step + cfg.steps_joint,
                            lineage + [_lineage_entry(ctx, "joint", cfg.steps_joint)],
                            rng_state=stream.get_state())


def stage_gan(cfg: TrainConfig, manifest: PairedManifest, warm: Checkpoint,
              features: FeatureStore | None = None, log: TrainingLog | None = None) -> Checkpoint:
    """Enhancer frozen; one discriminator, one classifier and one AutoVC update per step."""
    if warm is None or warm.stage != "joint" or not (warm.has("se") and warm.has("autovc")):
        raise MissingStageError("joint", "adversarial training")
    ctx = StageContext.create(cfg, manifest, features, log)
    nets = ctx.fresh_networks()
    nets.se.load_state_dict(warm.networks["se"])
    nets.autovc.load_state_dict(warm.networks["autovc"])
    torch.manual_seed(_stage_seed(cfg.seed, "gan"))
    gp_gen = torch.Generator().manual_seed(_stage_seed(cfg.seed, "gan:gp"))
    stream = ctx.stream("gan")

    se = nets.se.eval()
    for p in se.parameters():
        p.requires_grad_(False)
    autovc, D, C = nets.autovc.train(), nets.discriminator.train(), nets.classifier.train()
    G = Generator(autovc, se)
    w = cfg.weights
    opt_g = torch.optim.Adam(autovc.parameters(), lr=cfg.lr_g_gan, betas=cfg.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=cfg.betas)
    opt_c = torch.optim.Adam(C.parameters(), lr=cfg.lr_c, betas=cfg.betas)

    t0 = time.perf_counter()
    for i, b in enumerate(_batches(stream, cfg.steps_gan, cfg.data_workers)):
        x, y, src, tgt = b["x"], b["y"], b["src"], b["tgt"]
        with torch.no_grad():
            fake = G(x, src, tgt)

        opt_d.zero_grad()
        loss_d, terms_d = discriminator_objective(D, y, src, fake, tgt, w, generator=gp_gen)
        _check_finite(loss_d, "gan", i)
        loss_d.backward()
        opt_d.step()

        opt_c.zero_grad()
        loss_c, terms_c = classifier_objective(C, y, b["src_idx"])
        loss_c.backward()
        opt_c.step()

        opt_g.zero_grad()
        loss_f, terms_f = generator_objective(G, D, C, x, y, src, tgt, w)
        _check_finite(loss_f, "gan", i)
        loss_f.backward()
        opt_g.step()

        with torch.no_grad():
            d_real = D(y, src).mean().item()
            d_fake = D(fake, tgt).mean().item()
        record = {"L_D": loss_d.item(), "L_C": loss_c.item(), "L_F": loss_f.item(), "D_real": d_real, "D_fake": d_fake}
        record.update({k: v.item() for k, v in {**terms_d, **terms_c, **terms_f}.items()})
        ctx.log.append("gan", warm.step + i + 1, record, t0)

    for p in se.parameters():
        p.requires_grad_(True)
    keep = Networks(nets.cfg, se=nets.se, autovc=nets.autovc, discriminator=D, classifier=C)
    return _make_checkpoint(keep, cfg, "gan", warm.step + cfg.steps_gan,
                            list(warm.lineage) + [_lineage_entry(ctx, "gan", cfg.steps_gan)],
                            rng_state=stream.get_state())


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------


class StageCache(dict):
    """Memo of stage checkpoints keyed by stage name, shared across variant builds."""


def _cached(cache: StageCache | None, key: str, fn):
    if cache is not None and key in cache:
        return cache[key]
    ck = fn()
    if cache is not None:
        cache[key] = ck
    return ck


def _with_variant(ck: Checkpoint, variant: str, networks: dict, lineage: list[dict], step: int) -> Checkpoint:
    ck = copy.copy(ck)
    ck.variant, ck.networks, ck.lineage, ck.step = variant, networks, lineage, step
    return ck


def build_variant(name: str, cfg: TrainConfig, manifest: PairedManifest, features: FeatureStore | None = None,
                  log: TrainingLog | None = None, cache: StageCache | None = None) -> Checkpoint:
    """Train one of the four comparison systems from scratch (reusing ``cache`` when given)."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    features = features or FeatureStore()
    log = log if log is not None else TrainingLog()

    def se():
        return _cached(cache, "se", lambda: stage_pretrain_se(cfg, manifest, features, log))

    def vc_clean():
        return _cached(cache, "vc_clean", lambda: stage_train_vc_clean(cfg, manifest, features, log))

    def joint():
        return _cached(cache, "joint", lambda: stage_joint_se_vc(
            cfg, manifest, se(), features, log, vc_clean() if cfg.joint_from_clean_vc else None))

    if name == "autovc":
        vc = vc_clean()
        return _with_variant(vc, "autovc", {"autovc": vc.networks["autovc"]}, vc.lineage, vc.step)
    if name == "se_vc":
        s, vc = se(), vc_clean()
        return _with_variant(vc, "se_vc", {"se": s.networks["se"], "autovc": vc.networks["autovc"]},
                             s.lineage + vc.lineage, s.step + vc.step)
    if name == "jt_se_vc":
        j = joint()
        return _with_variant(j, "jt_se_vc", dict(j.networks), j.lineage, j.step)
    g = _cached(cache, "gan", lambda: stage_gan(cfg, manifest, joint(), features, log))
    return _with_variant(g, "estargan", dict(g.networks), g.lineage, g.step)


def build_all_variants(cfg: TrainConfig, manifest: PairedManifest, features: FeatureStore | None = None,
                       log: TrainingLog | None = None) -> dict[str, Checkpoint]:
    cache = StageCache()
    features = features or FeatureStore()
    return {v: build_variant(v, cfg, manifest, features, log, cache) for v in VARIANTS}
