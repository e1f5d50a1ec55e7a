"""Command-line entry point: ``estargan <subcommand> ...``.

Every subcommand accepts ``--seed``, ``--config`` and ``--dry-run``. The
config file is JSON with any :class:`~estargan.trainer.TrainConfig` fields;
``$ESTARGAN_CONFIG`` names a default one. Flags override the config file,
which overrides built-in defaults. The last line printed is always
``RESULT <json>`` with the exit code and every artifact path written.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    DESK_SNRS_DB,
    DESK_SPEAKERS,
    DESK_TEST_NOISES,
    DESK_TEST_SENTENCES,
    DESK_TRAIN_NOISES,
    DESK_UTTS_PER_SPEAKER,
    CorpusError,
    FeatureStore,
    PairedManifest,
    build_desk_corpus,
)
from .signal import SignalError, invert_log_mel, load_wav, log_mel, save_wav

EXIT_OK = 0
EXIT_USAGE = 64
EXIT_CONFIG = 65
EXIT_NO_INPUT = 66
EXIT_NUMERIC = 70

CONFIG_ENV = "ESTARGAN_CONFIG"
VARIANT_PREREQUISITES = {"autovc": (), "se_vc": (), "jt_se_vc": ("se",), "estargan": ("joint",)}
# stage checkpoints under <out>/stages that a variant picks up when present
REUSABLE_STAGES = {"autovc": (), "se_vc": ("se", "vc_clean"), "jt_se_vc": ("se", "vc_clean"), "estargan": ("se", "vc_clean", "joint")}


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    artifacts: list[str] = field(default_factory=list)
    summary: str = ""

    def line(self) -> str:
        return "RESULT " + json.dumps(
            {"exit_code": self.exit_code, "artifacts": self.artifacts, "summary": self.summary}, sort_keys=True
        )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _train_config(args):
    from .trainer import TrainConfig

    path = args.config or os.environ.get(CONFIG_ENV)
    values: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            values = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{p} must hold a JSON object")
    for key in ("steps_se", "steps_joint", "steps_gan", "steps_vc", "batch_size", "crop_frames", "profile"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _speaker(value: int, n: int, what: str) -> int:
    if not 0 <= value < n:
        raise ConfigError(f"{what} {value} outside [0, {n})")
    return value


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_make_corpus(args) -> CommandResult:
    seed = args.train_config.seed
    root = Path(args.out)
    if args.speakers < 2 or args.utts < 1:
        raise ConfigError("need at least 2 speakers and 1 utterance per speaker")
    if not 0 < args.test_sentences < args.utts:
        raise ConfigError("--test-sentences must be between 1 and --utts - 1")
    planned = [str(root / "train.jsonl"), str(root / "test.jsonl")]
    if args.dry_run:
        return CommandResult(summary=f"would synthesize {args.speakers}x{args.utts} utterances under {root}",
                             artifacts=planned)
    corpus = build_desk_corpus(root, seed, args.speakers, args.utts, args.test_sentences,
                               tuple(args.train_noises), tuple(args.test_noises), tuple(args.snrs))
    summary = (f"{len(corpus.train)} train / {len(corpus.test)} test utterances, "
               f"{corpus.train.n_renditions + corpus.test.n_renditions} noisy renditions")
    print(summary)
    return CommandResult(artifacts=[str(corpus.train_path), str(corpus.test_path)], summary=summary)


def _stage_path(out: Path, stage: str) -> Path:
    return out / "stages" / f"{stage}.ckpt"


def cmd_train(args) -> CommandResult:
    from .trainer import (
        StageCache,
        TrainingLog,
        build_variant,
        load_checkpoint,
        save_checkpoint,
    )

    cfg = args.train_config
    manifest = PairedManifest.load(_require(args.manifest, "training manifest"))
    model_cfg = cfg.model_config(manifest.n_speakers)
    out = Path(args.out)

    # explicit --warm checkpoints win over stage files found under <out>/stages
    cache = StageCache()
    for p in args.warm or []:
        ck = load_checkpoint(_require(p, "warm checkpoint"), expected=model_cfg)
        cache.setdefault(ck.stage, ck)
    for stage in REUSABLE_STAGES[args.variant]:
        p = _stage_path(out, stage)
        if stage not in cache and p.is_file():
            cache[stage] = load_checkpoint(p, expected=model_cfg)

    needed = VARIANT_PREREQUISITES[args.variant]
    if args.variant == "jt_se_vc" and cfg.joint_from_clean_vc:
        needed += ("vc_clean",)
    missing = [s for s in needed if s not in cache]
    if missing and not args.auto_stages:
        raise ConfigError(
            f"variant {args.variant!r} needs the {missing[0]!r} stage checkpoint; "
            f"train it first (e.g. `train --variant jt_se_vc`), pass --warm, or use --auto-stages"
        )
    ck_path = out / f"{args.variant}.ckpt"
    log_path = out / f"{args.variant}.log.jsonl"
    if args.dry_run:
        return CommandResult(artifacts=[str(ck_path), str(log_path)],
                             summary=f"would train {args.variant} (reusing stages: {sorted(cache)})")

    before = set(cache)
    log = TrainingLog()
    ck = build_variant(args.variant, cfg, manifest, FeatureStore(), log, cache)
    artifacts = [str(save_checkpoint(ck, ck_path)), str(log.save(log_path))]
    for stage in sorted(set(cache) - before - {"gan"}):
        artifacts.append(str(save_checkpoint(cache[stage], _stage_path(out, stage))))
    summary = f"trained {args.variant}: {len(log.records)} optimization steps, stages {[e['stage'] for e in ck.lineage]}"
    print(summary)
    return CommandResult(artifacts=artifacts, summary=summary)


def cmd_convert(args) -> CommandResult:
    from .evaluation import make_converter
    from .trainer import load_checkpoint

    ck = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    K = ck.model_config.n_speakers
    src = _speaker(args.src_speaker, K, "--src-speaker")
    tgt = _speaker(args.tgt_speaker, K, "--tgt-speaker")
    wave = load_wav(_require(args.src_wav, "source wav"), resample=True)
    out_lms = Path(args.out_lms or Path(args.src_wav).with_suffix(f".to{tgt}.npy").name)
    planned = [str(out_lms)] + ([str(args.out_wav)] if args.out_wav else [])
    if args.dry_run:
        return CommandResult(artifacts=planned, summary=f"would convert {args.src_wav} {src}->{tgt}")
    lms = log_mel(wave).frames
    converted = make_converter(ck)(lms, src, [tgt])[0]
    if not np.all(np.isfinite(converted)):
        raise FloatingPointError("conversion produced non-finite values")
    out_lms.parent.mkdir(parents=True, exist_ok=True)
    np.save(out_lms, converted.astype(np.float32))
    artifacts = [str(out_lms)]
    if args.out_wav:
        audio = invert_log_mel(converted, n_iters=args.griffin_lim_iters, seed=args.train_config.seed)
        artifacts.append(str(save_wav(args.out_wav, audio)))
    summary = f"converted {lms.shape[0]} frames from speaker {src} to {tgt}"
    print(summary)
    return CommandResult(artifacts=artifacts, summary=summary)


def cmd_evaluate(args) -> CommandResult:
    from .evaluation import evaluate_variant, render_tables
    from .trainer import load_checkpoint

    ck = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    test = PairedManifest.load(_require(args.manifest, "test manifest"))
    if test.n_speakers != ck.model_config.n_speakers:
        raise ConfigError(f"manifest has {test.n_speakers} speakers, checkpoint expects {ck.model_config.n_speakers}")
    out = Path(args.out or Path(args.checkpoint).with_suffix(".eval.json"))
    if args.dry_run:
        return CommandResult(artifacts=[str(out)], summary=f"would evaluate {ck.variant or ck.stage} on {len(test)} utterances")
    report = evaluate_variant(ck, test, FeatureStore(), ck.variant or ck.stage)
    print(render_tables([report]))
    return CommandResult(artifacts=[str(report.save(out))], summary=f"{report.variant}: mean MCD {report.mean:.3f} dB")


def cmd_plot(args) -> CommandResult:
    from .evaluation import export_panels, make_converter
    from .trainer import load_checkpoint

    src_wave = load_wav(_require(args.src_wav, "source wav"), resample=True)
    tgt_wave = load_wav(_require(args.target_wav, "target wav"), resample=True)
    cks = [load_checkpoint(_require(p, "checkpoint")) for p in args.checkpoint]
    out = Path(args.out)
    if args.dry_run:
        return CommandResult(artifacts=[str(out)], summary=f"would draw {2 + len(cks)} panels")
    noisy = log_mel(src_wave).frames
    panels = [("Source noisy", noisy), ("Target clean", log_mel(tgt_wave).frames)]
    for ck in cks:
        K = ck.model_config.n_speakers
        conv = make_converter(ck)(noisy, _speaker(args.src_speaker, K, "--src-speaker"),
                                  [_speaker(args.tgt_speaker, K, "--tgt-speaker")])[0]
        panels.append((_label(ck), conv))
    return CommandResult(artifacts=[str(export_panels(panels, out))], summary=f"{len(panels)} panels")


def _label(ck) -> str:
    from .evaluation import VARIANT_LABELS

    return VARIANT_LABELS.get(ck.variant, ck.variant or ck.stage)


def cmd_report(args) -> CommandResult:
    from .evaluation import EvalReport, evaluate_converter, evaluate_variant, render_tables, unconverted
    from .trainer import load_checkpoint

    reports = [EvalReport.load(_require(p, "report")) for p in args.reports or []]
    cks = [load_checkpoint(_require(p, "checkpoint")) for p in args.checkpoints or []]
    if cks and not args.manifest:
        raise ConfigError("--checkpoints needs --manifest")
    if not reports and not cks:
        raise ConfigError("give --reports and/or --checkpoints")
    test = PairedManifest.load(_require(args.manifest, "test manifest")) if args.manifest else None
    out = Path(args.out) if args.out else None
    if args.dry_run:
        return CommandResult(artifacts=[str(out)] if out else [],
                             summary=f"would tabulate {len(reports) + len(cks)} systems")
    features = FeatureStore()
    if args.baseline:
        if test is None:
            raise ConfigError("--baseline needs --manifest")
        reports.insert(0, evaluate_converter(unconverted, test, features, "unconverted"))
    reports += [evaluate_variant(ck, test, features) for ck in cks]
    table = render_tables(reports)
    print(table)
    artifacts = []
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + "\n")
        artifacts.append(str(out))
    return CommandResult(artifacts=artifacts, summary=f"{len(reports)} systems tabulated")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: config, else 0)")
    common.add_argument("--config", default=None, help=f"JSON TrainConfig overrides (default: ${CONFIG_ENV})")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and print planned outputs only")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="estargan", description="Noise-robust voice conversion pipeline on toy speech.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-corpus", parents=[common], help="synthesize the toy corpus and manifests")
    p.add_argument("--out", default="corpus")
    p.add_argument("--speakers", type=int, default=DESK_SPEAKERS)
    p.add_argument("--utts", type=int, default=DESK_UTTS_PER_SPEAKER)
    p.add_argument("--test-sentences", type=int, default=DESK_TEST_SENTENCES)
    p.add_argument("--train-noises", nargs="+", default=list(DESK_TRAIN_NOISES))
    p.add_argument("--test-noises", nargs="+", default=list(DESK_TEST_NOISES))
    p.add_argument("--snrs", nargs="+", type=float, default=list(DESK_SNRS_DB))
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train", parents=[common], help="train one comparison system")
    p.add_argument("--variant", required=True, choices=list(VARIANT_PREREQUISITES))
    p.add_argument("--manifest", default="corpus/train.jsonl")
    p.add_argument("--out", default="runs")
    p.add_argument("--warm", nargs="*", help="stage checkpoints to reuse")
    p.add_argument("--auto-stages", action="store_true", help="train missing prerequisite stages")
    p.add_argument("--profile", choices=["tiny", "paper"])
    for name in ("steps-se", "steps-joint", "steps-gan", "steps-vc", "batch-size", "crop-frames"):
        p.add_argument(f"--{name}", type=int, dest=name.replace("-", "_"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", parents=[common], help="convert one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src-wav", required=True)
    p.add_argument("--src-speaker", type=int, required=True)
    p.add_argument("--tgt-speaker", type=int, required=True)
    p.add_argument("--out-lms", help="converted log-mel (.npy)")
    p.add_argument("--out-wav", help="also write a Griffin-Lim waveform")
    p.add_argument("--griffin-lim-iters", type=int, default=32)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", parents=[common], help="MCD report for one checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default="corpus/test.jsonl")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", parents=[common], help="spectrogram panels (noisy, target, conversions)")
    p.add_argument("--src-wav", required=True)
    p.add_argument("--target-wav", required=True)
    p.add_argument("--src-speaker", type=int, required=True)
    p.add_argument("--tgt-speaker", type=int, required=True)
    p.add_argument("--checkpoint", nargs="*", default=[])
    p.add_argument("--out", default="spectrograms.png")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("report", parents=[common], help="comparison tables across systems")
    p.add_argument("--reports", nargs="*")
    p.add_argument("--checkpoints", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--baseline", action="store_true", help="add the unconverted noisy-source row")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv: list[str] | None = None) -> CommandResult:
    from .trainer import CheckpointCorruptError, CheckpointMismatchError, MissingStageError

    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing subcommand")
    except UsageError as exc:
        print(f"estargan: {exc}", file=sys.stderr)
        return CommandResult(EXIT_USAGE, summary=str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.train_config = _train_config(args)
        return args.func(args)
    except FileNotFoundError as exc:
        code, msg = EXIT_NO_INPUT, str(exc)
    except (ConfigError, MissingStageError, CheckpointMismatchError, CheckpointCorruptError, CorpusError,
            SignalError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except FloatingPointError as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    print(f"estargan {args.command}: {msg}", file=sys.stderr)
    return CommandResult(code, summary=msg)


def main(argv: list[str] | None = None) -> int:
    result = run(argv)
    print(result.line())
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
