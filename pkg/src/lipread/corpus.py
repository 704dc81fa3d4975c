"""Corpus data model, on-disk layout, train/test splits and a synthetic
mouth-ROI generator."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import archive
from .lexicon import (
    PHONEME,
    Lexicon,
    P2VMap,
    UnitSet,
    lexicon_for_prototypes,
    load_dictionary,
)

TRAIN = "train"
TEST = "test"
SD = "SD"
SI = "SI"


class CorpusError(ValueError):
    pass


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: str
    frames: np.ndarray  # T x H x W (ROI) or T x D (features)
    transcript: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", _frozen(self.frames))
        object.__setattr__(self, "transcript", tuple(self.transcript))
        if len(self.frames) < 1:
            raise CorpusError(f"{self.id}: no frames")
        if not self.transcript:
            raise CorpusError(f"{self.id}: empty transcript")
        if not np.all(np.isfinite(self.frames)):
            raise CorpusError(f"{self.id}: non-finite frame values")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def is_roi(self) -> bool:
        return self.frames.ndim == 3

    def flat(self) -> np.ndarray:
        """Frames as a T x D matrix (ROIs flattened row-major)."""
        return self.frames.reshape(len(self.frames), -1)


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    split: Mapping[str, str] = field(default_factory=dict)
    scenario: str | None = None
    lexicon: Lexicon | None = None
    frame_rate: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise CorpusError("utterance ids are not unique")
        if self.utterances and self.utterances[0].is_roi:
            shapes = {u.frames.shape[1:] for u in self.utterances}
            if len(shapes) > 1:
                raise CorpusError(f"mixed ROI sizes {sorted(shapes)}")
        if self.scenario == SI and self.split:
            tr = {u.speaker for u in self.subset(TRAIN)}
            te = {u.speaker for u in self.subset(TEST)}
            if tr & te:
                raise CorpusError(f"SI split shares speakers {sorted(tr & te)}")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, utt_id: str) -> Utterance:
        for u in self.utterances:
            if u.id == utt_id:
                return u
        raise KeyError(utt_id)

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def subset(self, part: str) -> list[Utterance]:
        return [u for u in self.utterances if self.split.get(u.id) == part]

    @property
    def utt2spk(self) -> dict[str, str]:
        return {u.id: u.speaker for u in self.utterances}

    @property
    def transcripts(self) -> dict[str, list[str]]:
        return {u.id: list(u.transcript) for u in self.utterances}


def split_corpus(corpus: Corpus, scenario: str, train_fraction: float | None = None,
                 speaker_lists: tuple[Sequence[str], Sequence[str]] | None = None,
                 seed: int = 0) -> Corpus:
    """Assign every utterance to train or test.

    SD keeps every speaker on both sides (per-speaker utterance split); SI
    partitions the speakers. Explicit ``speaker_lists`` (train, test) override
    the fraction for SI.
    """
    rng = np.random.default_rng(seed)
    speakers = corpus.speakers
    split: dict[str, str] = {}
    if scenario == SI:
        if len(speakers) < 2:
            raise CorpusError("SI split needs at least two speakers")
        if speaker_lists is not None:
            train_spk, test_spk = set(speaker_lists[0]), set(speaker_lists[1])
            if train_spk & test_spk:
                raise CorpusError("speaker lists overlap")
        else:
            f = 0.5 if train_fraction is None else train_fraction
            order = [speakers[i] for i in rng.permutation(len(speakers))]
            n_train = min(max(int(round(f * len(speakers))), 1), len(speakers) - 1)
            train_spk, test_spk = set(order[:n_train]), set(order[n_train:])
        for u in corpus:
            if u.speaker in train_spk:
                split[u.id] = TRAIN
            elif u.speaker in test_spk:
                split[u.id] = TEST
    elif scenario == SD:
        f = 0.7 if train_fraction is None else train_fraction
        for spk in speakers:
            ids = [u.id for u in corpus if u.speaker == spk]
            ids = [ids[i] for i in rng.permutation(len(ids))]
            n_train = int(round(f * len(ids)))
            if len(ids) > 1:
                n_train = min(max(n_train, 1), len(ids) - 1)
            for i, uid in enumerate(ids):
                split[uid] = TRAIN if i < n_train else TEST
    else:
        raise CorpusError(f"unknown scenario {scenario!r}")
    return replace(corpus, split=split, scenario=scenario)


# -- synthetic corpus ---------------------------------------------------------

def _cosine_basis(h, w, r, c):
    y = np.cos(np.pi * (2 * np.arange(h) + 1) * r / (2 * h))
    x = np.cos(np.pi * (2 * np.arange(w) + 1) * c / (2 * w))
    return np.outer(y, x)


def _pattern(h, w, key: int, n_terms: int = 12):
    """Smooth deterministic texture in [-1, 1] seeded only by ``key``."""
    rng = np.random.default_rng(1_000_003 + key)
    img = np.zeros((h, w))
    freqs = [(r, c) for s in range(1, 6) for r in range(s + 1) for c in [s - r]
             if r < h and c < w][:n_terms]
    for r, c in freqs:
        img += rng.normal() * _cosine_basis(h, w, r, c)
    return img / max(np.abs(img).max(), 1e-12)


def neutral_mouth(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    ellipse = ((yy - (h - 1) / 2) / (0.3 * h)) ** 2 + ((xx - (w - 1) / 2) / (0.4 * w)) ** 2
    return 0.55 - 0.15 * np.exp(-ellipse)


def render_prototypes(units: Sequence[str], image_size: tuple[int, int],
                      groups: Mapping[str, str] | None = None,
                      silence: Sequence[str] = (), contrast: float = 0.0) -> dict[str, np.ndarray]:
    """One mouth image per unit.

    Units in the same group share a base texture and differ only by a
    ``contrast``-scaled unit-specific texture; silence units render as the
    neutral mouth.
    """
    h, w = image_size
    groups = dict(groups or {})
    group_names = list(dict.fromkeys(groups.get(u, u) for u in units if u not in silence))
    if h < 4 or w < 4 or h * w < 4 * (len(group_names) + 1):
        raise CorpusError(f"image size {h}x{w} too small for {len(group_names)} prototypes")
    neutral = neutral_mouth(h, w)
    protos = {}
    for u in units:
        if u in silence:
            protos[u] = neutral
            continue
        gi = group_names.index(groups.get(u, u))
        img = neutral + 0.2 * _pattern(h, w, gi)
        if contrast and groups.get(u, u) != u:
            img = img + contrast * 0.2 * _pattern(h, w, 10_000 + list(units).index(u))
        protos[u] = img
    return protos


def _unit_frames(proto, prev, nxt, neutral, n, coart):
    start = (1 - coart) * neutral + coart * prev
    end = (1 - coart) * neutral + coart * nxt
    j = (np.arange(n) + 0.5) / n
    wgt = np.sin(np.pi * j) ** 0.5
    edge = np.where(j[:, None, None] < 0.5, start, end)
    return (1 - wgt[:, None, None]) * edge + wgt[:, None, None] * proto


def generate_synthetic_corpus(unit_set: UnitSet, n_speakers: int = 4, utts_per_speaker: int = 10,
                              words_per_utt: int = 5, image_size: tuple[int, int] = (32, 32),
                              noise_sigma: float = 0.05, seed: int = 7, *,
                              lexicon: Lexicon | None = None, n_words: int = 30,
                              groups: Mapping[str, str] | None = None, contrast: float = 0.0,
                              duration_range: tuple[int, int] = (4, 12),
                              silence_frames: tuple[int, int] = (0, 0),
                              coarticulation: float = 0.3, speaker_variation: float = 0.1,
                              grammar_strength: float = 0.7) -> Corpus:
    """Render a corpus of grey-scale mouth ROI sequences.

    Each speaker holds every unit for a speaker-specific duration and shows
    a speaker-specific brightness/contrast change. Transcripts are drawn
    from a sparse random word-bigram grammar (``grammar_strength`` is the
    probability of picking one of a word's preferred successors).
    """
    if not len(unit_set.speech_units):
        raise CorpusError("unit set has no speech units")
    rng = np.random.default_rng(seed)
    speech = unit_set.speech_units
    if lexicon is None:
        lexicon = lexicon_for_prototypes(n_words, speech, rng, kind=unit_set.kind)
    else:
        lexicon.check_units(unit_set)
    protos = render_prototypes(unit_set.units, image_size, groups, unit_set.silence, contrast)
    sil = unit_set.primary_silence if unit_set.silence else None
    h, w = image_size
    neutral = neutral_mouth(h, w)

    words = lexicon.words
    n_succ = min(4, len(words))
    preferred = {wd: [words[i] for i in rng.choice(len(words), n_succ, replace=False)] for wd in words}

    lo, hi = duration_range
    utts = []
    for s in range(n_speakers):
        spk = f"spk{s:02d}"
        dur = {u: int(rng.integers(lo, hi + 1)) for u in unit_set.units}
        gain = 1.0 + speaker_variation * rng.uniform(-1, 1)
        offset = speaker_variation * rng.uniform(-1, 1)
        for k in range(utts_per_speaker):
            trans = []
            for _ in range(words_per_utt):
                if trans and rng.random() < grammar_strength:
                    trans.append(preferred[trans[-1]][int(rng.integers(n_succ))])
                else:
                    trans.append(words[int(rng.integers(len(words)))])
            seq = []
            for wd in trans:
                prons = lexicon[wd]
                seq.extend(prons[int(rng.integers(len(prons)))])
            blocks = []
            if sil and silence_frames[1] > 0:
                blocks.append(np.repeat(neutral[None], int(rng.integers(silence_frames[0], silence_frames[1] + 1)), 0))
            for i, u in enumerate(seq):
                prev = protos[seq[i - 1]] if i > 0 else neutral
                nxt = protos[seq[i + 1]] if i + 1 < len(seq) else neutral
                blocks.append(_unit_frames(protos[u], prev, nxt, neutral, dur[u], coarticulation))
            if sil and silence_frames[1] > 0:
                blocks.append(np.repeat(neutral[None], int(rng.integers(silence_frames[0], silence_frames[1] + 1)), 0))
            frames = np.concatenate(blocks)
            frames = gain * frames + offset
            if noise_sigma > 0:
                frames = frames + rng.normal(0.0, noise_sigma, frames.shape)
            frames = np.clip(frames, 0.0, 1.0)
            utts.append(Utterance(f"{spk}_u{k:03d}", spk, frames, tuple(trans)))
    return Corpus(tuple(utts), lexicon=lexicon)


def p2v_from_groups(unit_set: UnitSet, groups: Mapping[str, str], silence_class: str = "S") -> P2VMap:
    mapping = {}
    for u in unit_set.units:
        mapping[u] = silence_class if u in unit_set.silence else groups.get(u, u)
    return P2VMap(mapping)


# -- on-disk corpus -----------------------------------------------------------

def save_corpus(corpus: Corpus, directory):
    """ROI files under ``rois/``, plus ``text``, ``utt2spk`` and ``lexicon.txt``."""
    d = Path(directory)
    (d / "rois").mkdir(parents=True, exist_ok=True)
    for u in corpus:
        if u.is_roi:
            archive.write_roi(u.id, u.frames, d / "rois" / f"{u.id}.roi")
    if not all(u.is_roi for u in corpus):
        archive.write_feature_archive({u.id: u.flat() for u in corpus if not u.is_roi}, d / "feats.ark")
    archive.write_transcripts(corpus.transcripts, d / "text")
    (d / "utt2spk").write_text("".join(f"{u.id} {u.speaker}\n" for u in corpus))
    if corpus.split:
        (d / "split").write_text("".join(f"{k} {v}\n" for k, v in sorted(corpus.split.items())))
    if corpus.lexicon is not None:
        (d / "lexicon.txt").write_text(corpus.lexicon.to_text())


def load_corpus(directory, scenario: str | None = None) -> Corpus:
    """Load a corpus directory; 8-bit ROI intensities are rescaled to [0, 1]."""
    d = Path(directory)
    trans = archive.read_transcripts(d / "text")
    spk = dict(line.split() for line in (d / "utt2spk").read_text().splitlines() if line.strip())
    frames: dict[str, np.ndarray] = {}
    roi_dir = d / "rois"
    if roi_dir.is_dir():
        for p in sorted(roi_dir.glob("*.roi")):
            key, imgs = archive.read_roi(p)
            if imgs.max(initial=0.0) > 1.0:
                imgs = imgs / 255.0
            frames[key] = imgs
    if (d / "feats.ark").exists():
        frames.update(archive.read_feature_archive(d / "feats.ark"))
    utts = []
    for uid, words in trans.items():
        if uid not in frames:
            raise CorpusError(f"no frames for utterance {uid!r}")
        if uid not in spk:
            raise CorpusError(f"no speaker for utterance {uid!r}")
        utts.append(Utterance(uid, spk[uid], frames[uid], tuple(words)))
    split = {}
    if (d / "split").exists():
        split = dict(line.split() for line in (d / "split").read_text().splitlines() if line.strip())
    lex = None
    if (d / "lexicon.txt").exists():
        lex = load_dictionary((d / "lexicon.txt").read_text(), kind=PHONEME)
    return Corpus(tuple(utts), split, scenario, lex)
