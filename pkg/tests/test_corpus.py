import numpy as np
import pytest

from lipread.archive import ArchiveError, read_feature_archive, write_feature_archive
from lipread.corpus import (
    SD,
    SI,
    TEST,
    TRAIN,
    Corpus,
    CorpusError,
    Utterance,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split_corpus,
)


@pytest.fixture(scope="module")
def corpus():
    from lipread.lexicon import UnitSet
    units = UnitSet(tuple("p b t d k g f v s z m n".split()) + ("sil",), "phoneme", frozenset({"sil"}))
    return generate_synthetic_corpus(units, n_speakers=4, utts_per_speaker=10, words_per_utt=5,
                                     image_size=(32, 32), noise_sigma=0.05, seed=7)


def test_generator_shape(corpus):
    assert len(corpus) == 40
    assert len(corpus.speakers) == 4
    for u in corpus:
        assert 20 <= u.n_frames <= 240
        assert u.frames.shape[1:] == (32, 32)
        assert len(u.transcript) == 5
        assert 0.0 <= u.frames.min() and u.frames.max() <= 1.0


def test_generator_deterministic(synth_units):
    a = generate_synthetic_corpus(synth_units, n_speakers=2, utts_per_speaker=3, seed=11)
    b = generate_synthetic_corpus(synth_units, n_speakers=2, utts_per_speaker=3, seed=11)
    for ua, ub in zip(a, b):
        assert ua.transcript == ub.transcript
        assert np.array_equal(ua.frames, ub.frames)


def test_noiseless_renderings_identical(synth_units):
    c = generate_synthetic_corpus(synth_units, n_speakers=1, utts_per_speaker=12, words_per_utt=1,
                                  noise_sigma=0.0, n_words=3, coarticulation=0.0, seed=3)
    by_word = {}
    for u in c:
        by_word.setdefault(u.transcript, []).append(u.frames)
    pairs = [v for v in by_word.values() if len(v) > 1]
    assert pairs
    for v in pairs:
        assert np.array_equal(v[0], v[1])


def test_frames_are_read_only(corpus):
    u = corpus.utterances[0]
    with pytest.raises(ValueError):
        u.frames[0, 0, 0] = 1.0


def test_utterance_validation():
    with pytest.raises(CorpusError):
        Utterance("a", "s", np.zeros((0, 4)), ("w",))
    with pytest.raises(CorpusError):
        Utterance("a", "s", np.zeros((3, 4)), ())
    with pytest.raises(CorpusError):
        Utterance("a", "s", np.full((3, 4), np.nan), ("w",))


def test_duplicate_ids_rejected():
    u = Utterance("a", "s", np.zeros((3, 4)), ("w",))
    with pytest.raises(CorpusError):
        Corpus((u, u))


def test_archive_roundtrip(tmp_path, rng):
    mats = {f"u{i}": rng.normal(size=(10, 44)) for i in range(3)}
    write_feature_archive(mats, tmp_path / "f.ark")
    back = read_feature_archive(tmp_path / "f.ark")
    assert list(back) == list(mats)
    for k in mats:
        assert np.array_equal(back[k], mats[k])


def test_archive_empty(tmp_path):
    write_feature_archive({}, tmp_path / "e.ark")
    assert read_feature_archive(tmp_path / "e.ark") == {}


def test_archive_truncated(tmp_path, rng):
    write_feature_archive({"u": rng.normal(size=(5, 3))}, tmp_path / "f.ark")
    data = (tmp_path / "f.ark").read_bytes()
    (tmp_path / "t.ark").write_bytes(data[:-7])
    with pytest.raises(ArchiveError, match="malformed archive"):
        read_feature_archive(tmp_path / "t.ark")


def test_save_load_roundtrip(tmp_path, synth_units):
    c = generate_synthetic_corpus(synth_units, n_speakers=2, utts_per_speaker=2, seed=5)
    c = split_corpus(c, SD, 0.5, seed=0)
    save_corpus(c, tmp_path / "c")
    back = load_corpus(tmp_path / "c")
    assert [u.id for u in back] == [u.id for u in c]
    assert back.transcripts == c.transcripts
    assert back.utt2spk == c.utt2spk
    for a, b in zip(c, back):
        assert np.allclose(a.frames, b.frames, atol=1 / 255)


def test_si_split_partitions_speakers(corpus):
    c = split_corpus(corpus, SI, 0.5, seed=0)
    tr = {u.speaker for u in c.subset(TRAIN)}
    te = {u.speaker for u in c.subset(TEST)}
    assert len(tr) == 2 and len(te) == 2
    assert not tr & te
    assert len(c.subset(TRAIN)) + len(c.subset(TEST)) == len(c)


def test_sd_split_keeps_speakers(corpus):
    c = split_corpus(corpus, SD, 0.7, seed=0)
    assert {u.speaker for u in c.subset(TRAIN)} == {u.speaker for u in c.subset(TEST)} == set(c.speakers)
    assert len(c.subset(TRAIN)) == 28


def test_sd_fraction_proportion():
    utts = tuple(Utterance(f"s{s:02d}_{i:03d}", f"s{s:02d}", np.zeros((2, 2)), ("w",))
                 for s in range(59) for i in range(93))
    c = split_corpus(Corpus(utts), SD, 0.68, seed=0)
    frac = len(c.subset(TRAIN)) / len(c)
    assert abs(frac - 3752 / (3752 + 1736)) < 0.01


def test_split_deterministic(corpus):
    a = split_corpus(corpus, SI, 0.5, seed=4)
    b = split_corpus(corpus, SI, 0.5, seed=4)
    assert a.split == b.split


def test_si_explicit_lists_overlap(corpus):
    with pytest.raises(CorpusError):
        split_corpus(corpus, SI, speaker_lists=(["spk00", "spk01"], ["spk01"]))
