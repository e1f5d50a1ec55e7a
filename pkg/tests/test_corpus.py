import hashlib
import json
import logging

import numpy as np
import pytest

from estargan import corpus as C
from estargan.signal import load_wav, log_mel


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.wav")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_speaker_onehot():
    np.testing.assert_array_equal(C.speaker_onehot(3, 8).vector, [0, 0, 0, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(C.speaker_onehot(0, 2).vector, [1, 0])
    with pytest.raises(C.CorpusError):
        C.speaker_onehot(8, 8)
    with pytest.raises(C.CorpusError):
        C.speaker_onehot(-1, 8)


@pytest.mark.parametrize("k", [1, 2, 5, 8])
def test_onehot_sums_to_one(k):
    m = C.onehot_matrix(np.arange(k), k)
    np.testing.assert_array_equal(m.sum(axis=1), 1)
    np.testing.assert_array_equal(m.max(axis=1), 1)


def test_toy_corpus_is_deterministic(tmp_path):
    a = C.make_toy_corpus(tmp_path / "a", 2, 5, seed=7)
    b = C.make_toy_corpus(tmp_path / "b", 2, 5, seed=7)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert len(a) == len(b) == 10


def test_toy_speakers_are_distinct(tmp_path):
    m = C.make_toy_corpus(tmp_path, 2, 5, seed=7)
    means = []
    for spk in range(2):
        frames = [log_mel(load_wav(r.clean_path)).frames for r in m.records if r.speaker == spk]
        means.append(np.concatenate(frames).mean(axis=0))
    assert np.sum(np.abs(means[0] - means[1]) > 0.5) >= 10


def test_toy_corpus_rejects_bad_counts(tmp_path):
    with pytest.raises(C.CorpusError):
        C.make_toy_corpus(tmp_path, 1, 5)
    with pytest.raises(C.CorpusError):
        C.make_toy_corpus(tmp_path, 2, 0)


def test_shared_sentences_across_speakers(tmp_path):
    m = C.make_toy_corpus(tmp_path, 3, 4, seed=1)
    texts = {}
    for r in m.records:
        texts.setdefault(r.text_id, set()).add(r.speaker)
    assert all(s == {0, 1, 2} for s in texts.values())
    assert len({m.gender_of(s) for s in range(3)}) == 2


def test_rendition_count_and_snr(tmp_path):
    clean = C.make_toy_corpus(tmp_path / "c", 2, 5, seed=0)
    noises = {"white": C.make_noise("white", 3.0, 0), "pink": C.make_noise("pink", 3.0, 0)}
    noisy = C.synthesize_noisy(clean, noises, [0.0, 5.0, 15.0], 0, tmp_path / "n")
    assert noisy.n_renditions == 60
    for rec in noisy.records[:3]:
        for r in rec.noisy:
            assert abs(C.measure_rendition_snr(rec, r) - r.snr_db) < 0.01


def test_synthesize_noisy_errors(tmp_path):
    clean = C.make_toy_corpus(tmp_path / "c", 2, 1, seed=0)
    with pytest.raises(C.CorpusError):
        C.synthesize_noisy(clean, {}, [5.0], 0, tmp_path / "n")
    with pytest.raises(C.CorpusError):
        C.synthesize_noisy(clean, {"white": C.make_noise("white", 1.0)}, [5.0], 0, tmp_path / "n",
                           forbidden_noise_names=["white"])
    from estargan.signal import Waveform
    with pytest.raises(C.CorpusError):
        C.synthesize_noisy(clean, {"mute": Waveform(np.zeros(100))}, [5.0], 0, tmp_path / "n")
    with pytest.raises(C.CorpusError):
        C.make_noise("thunder")


def test_split_hygiene(small_corpus):
    train, test = small_corpus.train, small_corpus.test
    assert not train.noise_names & test.noise_names
    assert not {r.utterance_id for r in train.records} & {r.utterance_id for r in test.records}
    assert not {r.text_id for r in train.records} & {r.text_id for r in test.records}
    with pytest.raises(C.CorpusError):
        C.check_split_hygiene(train, train)


def test_manifest_round_trip(small_corpus, tmp_path):
    loaded = C.PairedManifest.load(small_corpus.train_path)
    assert loaded == small_corpus.train
    loaded.validate()
    header = json.loads(small_corpus.train_path.read_text().splitlines()[0])
    assert header["schema_version"] == C.MANIFEST_SCHEMA_VERSION
    # paths are relative on disk
    first = json.loads(small_corpus.train_path.read_text().splitlines()[1])
    assert not first["clean_path"].startswith("/")


def test_manifest_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        C.PairedManifest.load(tmp_path / "none.jsonl")
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"kind": "paired_manifest", "schema_version": 99}) + "\n")
    with pytest.raises(C.CorpusError):
        C.PairedManifest.load(p)
    p.write_text(json.dumps({"kind": "other"}) + "\n")
    with pytest.raises(C.CorpusError):
        C.PairedManifest.load(p)


def test_batch_shapes_and_alignment(small_corpus, features):
    stream = C.sample_batches(small_corpus.train, 32, 4, seed=0, features=features)
    b = next(stream)
    assert b.noisy.shape == b.clean.shape == (4, 32, 80)
    assert b.src.shape == b.tgt.shape == (4, 2)
    # each clean crop is found verbatim at some offset of its source utterance, and the
    # noisy crop at the same offset of one of that utterance's renditions
    for i in range(4):
        hits = []
        for rec in small_corpus.train.records:
            y = features(rec.clean_path)
            for off in range(y.shape[0] - 31):
                if np.array_equal(y[off : off + 32], b.clean[i]):
                    hits.append((rec, off))
        assert hits
        rec, off = hits[0]
        assert rec.speaker == b.src_idx[i]
        assert any(np.array_equal(features(r.path)[off : off + 32], b.noisy[i]) for r in rec.noisy)


def test_batch_determinism_and_state(small_corpus, features):
    a = C.sample_batches(small_corpus.train, 32, 3, seed=5, features=features)
    b = C.sample_batches(small_corpus.train, 32, 3, seed=5, features=features)
    for _ in range(4):
        x, y = next(a), next(b)
        assert np.array_equal(x.noisy, y.noisy) and np.array_equal(x.tgt, y.tgt)
    state = a.get_state()
    first = next(a)
    a.set_state(state)
    assert np.array_equal(next(a).noisy, first.noisy)


def test_batch_errors(small_corpus, features, caplog):
    with pytest.raises(C.CorpusError):
        C.sample_batches(small_corpus.train, 30, 4, 0, features)
    with pytest.raises(C.CorpusError):
        C.sample_batches(small_corpus.train, 32, 0, 0, features)
    with caplog.at_level(logging.WARNING), pytest.raises(C.CorpusError):
        C.sample_batches(small_corpus.train, 16 * 64, 4, 0, features)


def test_clean_only_stream_uses_clean_crops(small_corpus, features):
    b = next(C.sample_batches(small_corpus.train, 32, 4, 0, features, clean_only=True))
    np.testing.assert_array_equal(b.noisy, b.clean)


def test_target_sampling_is_uniform(small_corpus, features):
    stream = C.sample_batches(small_corpus.train, 16, 64, 0, features)
    counts = np.bincount(np.concatenate([next(stream).tgt_idx for _ in range(20)]), minlength=2)
    assert abs(counts[0] / counts.sum() - 0.5) < 0.05


def test_feature_stats(small_corpus, features):
    mean, std = C.feature_stats(small_corpus.train, features)
    assert mean.shape == std.shape == (80,)
    assert np.all(std >= 1e-3)
