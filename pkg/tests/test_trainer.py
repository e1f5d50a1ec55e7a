import json

import numpy as np
import pytest
import torch

from estargan import trainer as T
from estargan.corpus import feature_stats
from estargan.se_model import se_loss
from estargan.conversion_model import autovc_loss_terms

FAST = dict(steps_se=6, steps_joint=6, steps_gan=4, batch_size=2, crop_frames=32)


def tiny_cfg(**kw):
    return T.TrainConfig(**{**FAST, **kw})


def same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def stages(small_corpus, features):
    """Stage checkpoints of one short seeded run, plus its log."""
    cfg = tiny_cfg()
    log = T.TrainingLog()
    cache = T.StageCache()
    cks = {v: T.build_variant(v, cfg, small_corpus.train, features, log, cache) for v in T.VARIANTS}
    return cfg, cache, cks, log


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_validation():
    for bad in (dict(steps_se=-1), dict(crop_frames=40), dict(lambda_cyc=-0.1), dict(batch_size=0), dict(lr_d=0)):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad)
    with pytest.raises(ValueError):
        T.TrainConfig.from_dict({"nonsense": 1})


def test_config_round_trip(tmp_path):
    cfg = T.TrainConfig(seed=4, steps_vc=7, betas=(0.5, 0.9))
    assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert T.TrainConfig.load(p) == cfg
    assert cfg.vc_steps == 7 and T.TrainConfig().vc_steps == T.TrainConfig().steps_joint


def test_paper_schedule():
    p = T.TrainConfig.paper_schedule()
    assert (p.steps_se, p.steps_joint, p.steps_gan) == (220_000, 905_000, 380_000)
    assert p.profile == "paper" and {p.lr_se, p.lr_g, p.lr_d, p.lr_c, p.lr_g_gan} == {1e-4}
    assert p.lambda_se_joint == 0.0 and not p.joint_from_clean_vc
    d = T.TrainConfig()
    assert (d.steps_se, d.steps_joint, d.steps_gan) == (2000, 5000, 2000)
    assert (d.lambda_cls, d.lambda_cyc, d.lambda_idm, d.lambda_gp, d.lambda_auto) == (1, 10, 5, 10, 1)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def test_zero_step_se_equals_initialization(small_corpus, features):
    cfg = tiny_cfg(steps_se=0)
    ck = T.stage_pretrain_se(cfg, small_corpus.train, features)
    init = T.Networks.fresh(cfg.model_config(2), cfg.seed, feature_stats(small_corpus.train, features))
    assert same_state(ck.networks["se"], init.se.state_dict())
    assert ck.step == 0


def test_se_stage_deterministic(small_corpus, features):
    a = T.stage_pretrain_se(tiny_cfg(), small_corpus.train, features)
    b = T.stage_pretrain_se(tiny_cfg(), small_corpus.train, features)
    assert same_state(a.networks["se"], b.networks["se"])
    c = T.stage_pretrain_se(tiny_cfg(seed=1), small_corpus.train, features)
    assert not same_state(a.networks["se"], c.networks["se"])


def test_empty_manifest(small_corpus, features):
    with pytest.raises(T.TrainingError):
        T.stage_pretrain_se(tiny_cfg(), small_corpus.train.with_records([]), features)


def test_joint_updates_se(stages):
    _, cache, _, _ = stages
    assert not same_state(cache["se"].networks["se"], cache["joint"].networks["se"])


def test_joint_requires_se(small_corpus, features, stages):
    _, cache, _, _ = stages
    with pytest.raises(T.MissingStageError):
        T.stage_joint_se_vc(tiny_cfg(), small_corpus.train, cache["vc_clean"], features)
    with pytest.raises(T.MissingStageError):
        T.stage_joint_se_vc(tiny_cfg(), small_corpus.train, None, features)


def test_fresh_joint_autovc(small_corpus, features, stages):
    _, cache, _, _ = stages
    cfg = tiny_cfg(steps_joint=0, joint_from_clean_vc=False)
    j = T.stage_joint_se_vc(cfg, small_corpus.train, cache["se"], features)
    assert [e["stage"] for e in j.lineage] == ["se", "joint"]
    assert not same_state(j.networks["autovc"], cache["vc_clean"].networks["autovc"])


def test_joint_from_clean_vc(small_corpus, features, stages):
    _, cache, _, _ = stages
    cfg = tiny_cfg(steps_joint=0)
    with pytest.raises(T.MissingStageError):
        T.stage_joint_se_vc(cfg, small_corpus.train, cache["se"], features)
    j = T.stage_joint_se_vc(cfg, small_corpus.train, cache["se"], features, vc_warm=cache["vc_clean"])
    assert same_state(j.networks["autovc"], cache["vc_clean"].networks["autovc"])
    assert [e["stage"] for e in j.lineage] == ["se", "vc_clean", "joint"]
    assert j.step == cache["se"].step + cache["vc_clean"].step


def test_gan_freezes_se_and_logs_every_stream(stages):
    cfg, cache, _, log = stages
    assert same_state(cache["joint"].networks["se"], cache["gan"].networks["se"])
    rows = log.stage("gan")
    assert len(rows) == cfg.steps_gan
    for r in rows:
        assert {"L_D", "L_C", "L_F", "adv_D", "gp_D", "cls_C", "adv_F", "cls_F", "cyc_F", "idm_F"} <= r.keys()
        assert all(np.isfinite(v) for k, v in r.items() if k != "stage")


def test_gan_requires_joint(small_corpus, features, stages):
    _, cache, _, _ = stages
    with pytest.raises(T.MissingStageError):
        T.stage_gan(tiny_cfg(), small_corpus.train, cache["se"], features)


def test_log_one_record_per_step_and_monotone(stages):
    cfg, _, _, log = stages
    counts = {s: len(log.stage(s)) for s in T.STAGES}
    assert counts == {"se": cfg.steps_se, "vc_clean": cfg.vc_steps, "joint": cfg.steps_joint, "gan": cfg.steps_gan}
    for s in ("se", "joint", "gan"):
        steps = [r["step"] for r in log.stage(s)]
        assert steps == sorted(steps) and len(set(steps)) == len(steps)
    # the step counter keeps rising through the se -> joint -> gan lineage
    assert log.stage("se")[-1]["step"] < log.stage("joint")[0]["step"]
    assert log.stage("joint")[-1]["step"] < log.stage("gan")[0]["step"]


def test_log_round_trip(stages, tmp_path):
    *_, log = stages
    loaded = T.TrainingLog.load(log.save(tmp_path / "log.jsonl"))
    assert loaded.losses() == log.losses()


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------


def test_variant_construction(stages):
    _, cache, cks, _ = stages
    assert set(cks["autovc"].networks) == {"autovc"}
    assert set(cks["se_vc"].networks) == {"se", "autovc"}
    assert same_state(cks["se_vc"].networks["autovc"], cache["vc_clean"].networks["autovc"])
    assert same_state(cks["se_vc"].networks["se"], cache["se"].networks["se"])
    assert set(cks["estargan"].networks) == set(T.NETWORK_NAMES)
    assert [e["stage"] for e in cks["estargan"].lineage] == ["se", "vc_clean", "joint", "gan"]
    assert [e["stage"] for e in cks["se_vc"].lineage] == ["se", "vc_clean"]


def test_variants_share_data_and_architecture(stages):
    _, _, cks, _ = stages
    entries = [e for ck in cks.values() for e in ck.lineage]
    assert len({e["data"] for e in entries}) == 1
    assert len({e["config"] for e in entries}) == 1
    assert len({ck.config_hash for ck in cks.values()}) == 1


def test_clean_vc_ignores_noise(small_corpus, features):
    """The clean-speech AutoVC is unchanged when every noisy rendition is dropped."""
    cfg = tiny_cfg()
    a = T.stage_train_vc_clean(cfg, small_corpus.train, features)
    stripped = small_corpus.train.with_records(
        [type(r)(r.utterance_id, r.speaker, r.speaker_name, r.gender, r.clean_path, r.text_id, []) for r in small_corpus.train.records]
    )
    b = T.stage_train_vc_clean(cfg, stripped, features)
    assert same_state(a.networks["autovc"], b.networks["autovc"])


def test_unknown_variant(small_corpus, features):
    with pytest.raises(ValueError):
        T.build_variant("cyclegan", tiny_cfg(), small_corpus.train, features)


def test_threaded_loading_matches_sequential(small_corpus, features):
    logs = []
    for workers in (0, 2):
        log = T.TrainingLog()
        T.stage_pretrain_se(tiny_cfg(data_workers=workers), small_corpus.train, features, log)
        logs.append(log.losses())
    assert logs[0] == logs[1]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _probe_outputs(nets):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 32, 80, generator=g) - 5
    K = nets.cfg.n_speakers
    s, t = torch.eye(K)[[0, 1]], torch.eye(K)[[1, 0]]
    out = {}
    with torch.no_grad():
        if nets.se is not None:
            out["se"] = nets.se(x)
        if nets.autovc is not None:
            out["autovc"] = torch.cat(nets.autovc(x, s, t))
            out["generator"] = nets.generator(nets.se is not None)(x, s, t)
        if nets.discriminator is not None:
            out["discriminator"] = nets.discriminator(x, t)
        if nets.classifier is not None:
            out["classifier"] = nets.classifier(x)
    return out


def test_checkpoint_round_trip_bit_identical(stages, tmp_path):
    _, _, cks, _ = stages
    ck = cks["estargan"]
    before = _probe_outputs(ck.build())
    loaded = T.load_checkpoint(T.save_checkpoint(ck, tmp_path / "e.ckpt"), expected=ck.model_config)
    after = _probe_outputs(loaded.build())
    assert before.keys() == after.keys() == {"se", "autovc", "generator", "discriminator", "classifier"}
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert loaded.lineage == ck.lineage and loaded.variant == "estargan" and loaded.step == ck.step
    assert loaded.rng_state == ck.rng_state


def test_checkpoint_bytes_deterministic(stages, tmp_path):
    _, _, cks, _ = stages
    a = T.save_checkpoint(cks["jt_se_vc"], tmp_path / "a.ckpt").read_bytes()
    b = T.save_checkpoint(T.load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt").read_bytes()
    assert a == b


def test_checkpoint_corruption(stages, tmp_path):
    _, _, cks, _ = stages
    p = T.save_checkpoint(cks["autovc"], tmp_path / "a.ckpt")
    raw = p.read_bytes()
    for name, data in {
        "truncated": raw[: len(raw) // 2],
        "header_only": raw[:20],
        "bad_magic": b"XXXXXXXX" + raw[8:],
        "flipped": raw[:-10] + bytes([raw[-10] ^ 0xFF]) + raw[-9:],
    }.items():
        q = tmp_path / f"{name}.ckpt"
        q.write_bytes(data)
        with pytest.raises(T.CheckpointCorruptError):
            T.load_checkpoint(q)
    with pytest.raises(FileNotFoundError):
        T.load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_hash_mismatch_names_fields(stages, tmp_path):
    from dataclasses import replace

    _, _, cks, _ = stages
    ck = cks["autovc"]
    p = T.save_checkpoint(ck, tmp_path / "a.ckpt")
    other = replace(ck.model_config, enc_hidden=12, se_hidden=7)
    with pytest.raises(T.CheckpointMismatchError) as info:
        T.load_checkpoint(p, expected=other)
    assert set(info.value.fields) == {"enc_hidden", "se_hidden"}
    assert "enc_hidden" in str(info.value)


# ---------------------------------------------------------------------------
# learning progress
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_se_training_halves_loss(small_corpus, features):
    log = T.TrainingLog()
    T.stage_pretrain_se(T.TrainConfig(steps_se=500, crop_frames=32), small_corpus.train, features, log)
    losses = [r["se"] for r in log.records]
    assert np.mean(losses[-20:]) <= 0.5 * np.mean(losses[:5])


@pytest.mark.slow
def test_clean_autovc_learns_reconstruction(small_corpus, features):
    cfg = T.TrainConfig(steps_joint=2000, crop_frames=32)
    init = T.stage_train_vc_clean(T.TrainConfig(steps_joint=0, crop_frames=32), small_corpus.train, features)
    done = T.stage_train_vc_clean(cfg, small_corpus.train, features)
    stream = T.StageContext.create(cfg, small_corpus.train, features).stream("probe", clean_only=True)
    b = next(stream)
    y, src = torch.from_numpy(b.clean), torch.from_numpy(b.src)
    with torch.no_grad():
        before = autovc_loss_terms(y, src, init.build().autovc)["rec_post"].item()
        after = autovc_loss_terms(y, src, done.build().autovc)["rec_post"].item()
    assert after <= 0.3 * before
