"""Unit inventories, phoneme-to-viseme mapping, pronunciation dictionaries,
homophone analysis and the bigram language model."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

PHONEME = "phoneme"
VISEME = "viseme"

BOS = "<s>"
EOS = "</s>"


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class UnitSet:
    """Ordered inventory of modelling units.

    Silence units are regular members of ``units`` that the recogniser treats
    as optional fillers and the scorer ignores.
    """

    units: tuple[str, ...]
    kind: str
    silence: frozenset[str] = frozenset()

    def __post_init__(self):
        if len(set(self.units)) != len(self.units):
            raise LexiconError("duplicate unit symbols")
        if self.kind not in (PHONEME, VISEME):
            raise LexiconError(f"unknown unit kind {self.kind!r}")
        missing = set(self.silence) - set(self.units)
        if missing:
            raise LexiconError(f"silence units not in inventory: {sorted(missing)}")

    def __contains__(self, unit):
        return unit in self.units

    def __len__(self):
        return len(self.units)

    def __iter__(self):
        return iter(self.units)

    def index(self, unit: str) -> int:
        return self.units.index(unit)

    @property
    def speech_units(self) -> tuple[str, ...]:
        return tuple(u for u in self.units if u not in self.silence)

    @property
    def primary_silence(self) -> str:
        """The silence unit used at utterance boundaries."""
        for u in self.units:
            if u in self.silence:
                return u
        raise LexiconError("unit set has no silence unit")


@dataclass(frozen=True)
class P2VMap:
    mapping: Mapping[str, str]

    def __getitem__(self, phoneme):
        try:
            return self.mapping[phoneme]
        except KeyError:
            raise LexiconError(f"unmapped phoneme {phoneme!r}") from None

    @property
    def visemes(self) -> tuple[str, ...]:
        seen = dict.fromkeys(self.mapping.values())
        return tuple(seen)

    @property
    def phonemes(self) -> tuple[str, ...]:
        return tuple(self.mapping)

    def classes(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for p, v in self.mapping.items():
            out[v].append(p)
        return dict(out)

    @classmethod
    def parse(cls, text: str) -> "P2VMap":
        mapping: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            viseme, *phonemes = line.split()
            if not phonemes:
                raise LexiconError(f"line {lineno}: viseme {viseme} has no phonemes")
            for p in phonemes:
                if p in mapping:
                    raise LexiconError(f"line {lineno}: phoneme {p!r} mapped twice")
                mapping[p] = viseme
        return cls(mapping)

    def to_text(self) -> str:
        return "".join(f"{v} {' '.join(ps)}\n" for v, ps in self.classes().items())


def neti_map() -> P2VMap:
    """The shipped 13-class Neti mapping over TIMIT phonemes."""
    text = resources.files("lipread").joinpath("data/neti_p2v.txt").read_text()
    return P2VMap.parse(text)


def phoneme_units(p2v: P2VMap | None = None) -> UnitSet:
    p2v = p2v or neti_map()
    sil = {"sil", "sp"} & set(p2v.phonemes)
    return UnitSet(p2v.phonemes, PHONEME, frozenset(sil))


def viseme_units(p2v: P2VMap | None = None) -> UnitSet:
    p2v = p2v or neti_map()
    sil = {p2v[s] for s in ("sil", "sp") if s in p2v.mapping}
    return UnitSet(p2v.visemes, VISEME, frozenset(sil))


@dataclass
class Lexicon:
    """Word to pronunciation dictionary.

    ``entries`` preserves insertion order; each word maps to a list of
    distinct pronunciations (tuples of unit symbols).
    """

    entries: dict[str, list[tuple[str, ...]]]
    kind: str
    n_duplicates: int = 0

    def __post_init__(self):
        for word, prons in self.entries.items():
            if not prons:
                raise LexiconError(f"word {word!r} has no pronunciation")
            if len(set(prons)) != len(prons):
                raise LexiconError(f"duplicate pronunciation for {word!r}")
            for p in prons:
                if not p:
                    raise LexiconError(f"empty pronunciation for {word!r}")

    @property
    def words(self) -> list[str]:
        return list(self.entries)

    def __contains__(self, word):
        return word in self.entries

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, word) -> list[tuple[str, ...]]:
        return self.entries[word]

    def items(self):
        """(word, pronunciation) pairs in dictionary order."""
        for w, prons in self.entries.items():
            for p in prons:
                yield w, p

    def units(self) -> set[str]:
        return {u for _, p in self.items() for u in p}

    def check_units(self, unit_set: UnitSet):
        for w, p in self.items():
            for u in p:
                if u not in unit_set:
                    raise LexiconError(f"unknown unit symbol {u!r} in word {w!r}")

    def to_text(self) -> str:
        return "".join(f"{w} {' '.join(p)}\n" for w, p in self.items())

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Sequence[str]]], kind: str) -> "Lexicon":
        entries: dict[str, list[tuple[str, ...]]] = {}
        dups = 0
        for w, p in pairs:
            p = tuple(p)
            prons = entries.setdefault(w, [])
            if p in prons:
                dups += 1
            else:
                prons.append(p)
        return cls(entries, kind, dups)


def load_dictionary(text: str, unit_set: UnitSet | None = None, kind: str | None = None) -> Lexicon:
    """Parse ``<WORD> <unit> <unit> ...`` lines.

    Repeated (word, pronunciation) lines are collapsed and counted in
    ``Lexicon.n_duplicates``. When ``unit_set`` is given every symbol is
    checked against it.
    """
    if kind is None:
        kind = unit_set.kind if unit_set is not None else PHONEME
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word, *units = line.split()
        if not units:
            raise LexiconError(f"line {lineno}: empty pronunciation for {word!r}")
        if unit_set is not None:
            for u in units:
                if u not in unit_set:
                    raise LexiconError(f"line {lineno}: unknown unit symbol {u!r}")
        pairs.append((word, units))
    return Lexicon.from_pairs(pairs, kind)


def map_pronunciation(pron: Sequence[str], p2v: P2VMap) -> tuple[str, ...]:
    return tuple(p2v[p] for p in pron)


def derive_viseme_lexicon(lexicon: Lexicon, p2v: P2VMap) -> Lexicon:
    if lexicon.kind != PHONEME:
        raise LexiconError("wrong unit kind: expected a phoneme lexicon")
    lex = Lexicon.from_pairs(
        ((w, map_pronunciation(p, p2v)) for w, p in lexicon.items()), VISEME
    )
    lex.n_duplicates = 0
    return lex


def homophone_groups(lexicon: Lexicon) -> dict[tuple[str, ...], list[str]]:
    groups: dict[tuple[str, ...], list[str]] = defaultdict(list)
    for w, p in lexicon.items():
        groups[p].append(w)
    return dict(groups)


def homophone_histogram(lexicon: Lexicon) -> dict[int, int]:
    """Bin dictionary items by the size of their homophone group.

    Bin ``k`` counts the (word, pronunciation) items whose pronunciation is
    shared by exactly ``k`` items, so ``{1: n}`` means every item is unique.
    """
    hist: Counter[int] = Counter()
    for words in homophone_groups(lexicon).values():
        hist[len(words)] += len(words)
    return dict(sorted(hist.items()))


def vocabulary_stats(phoneme_lex: Lexicon, viseme_lex: Lexicon) -> dict[str, dict[str, int]]:
    if set(phoneme_lex.words) != set(viseme_lex.words):
        raise LexiconError("word lists differ between the two lexicons")

    def stats(lex):
        return {
            "words": len(lex.words),
            "pronunciations": len({p for _, p in lex.items()}),
        }

    return {PHONEME: stats(phoneme_lex), VISEME: stats(viseme_lex)}


@dataclass
class BigramLm:
    """Bigram model in backoff form, natural-log probabilities.

    ``bigram[h][w]`` holds explicit conditionals for observed pairs; any
    other successor of ``h`` costs ``backoff[h] + unigram[w]``.
    """

    vocab: list[str]
    unigram: dict[str, float]
    bigram: dict[str, dict[str, float]] = field(default_factory=dict)
    backoff: dict[str, float] = field(default_factory=dict)

    @property
    def histories(self) -> list[str]:
        return [BOS] + list(self.vocab)

    @property
    def successors(self) -> list[str]:
        return list(self.vocab) + [EOS]

    def logprob(self, word: str, history: str) -> float:
        if word not in self.unigram:
            raise LexiconError(f"word {word!r} not in LM vocabulary")
        explicit = self.bigram.get(history, {})
        if word in explicit:
            return explicit[word]
        return self.backoff.get(history, 0.0) + self.unigram[word]

    def sentence_logprob(self, words: Sequence[str]) -> float:
        total = 0.0
        h = BOS
        for w in list(words) + [EOS]:
            total += self.logprob(w, h)
            h = w
        return total

    def cost(self, words: Sequence[str]) -> float:
        """Negative natural-log probability including sentence markers."""
        return -self.sentence_logprob(words)

    def perplexity(self, sentences: Iterable[Sequence[str]]) -> float:
        lp = 0.0
        n = 0
        for s in sentences:
            lp += self.sentence_logprob(s)
            n += len(s) + 1
        return math.exp(-lp / n)

    def check_normalized(self, tol: float = 1e-6):
        for h in self.histories:
            total = sum(math.exp(self.logprob(w, h)) for w in self.successors)
            if abs(total - 1.0) > tol:
                raise LexiconError(f"history {h!r} sums to {total}")

    def to_arpa(self) -> str:
        lines = ["\\data\\"]
        n_bi = sum(len(v) for v in self.bigram.values())
        lines.append(f"ngram 1={len(self.unigram) + 1}")
        lines.append(f"ngram 2={n_bi}")
        lines.append("")
        lines.append("\\1-grams:")
        ln10 = math.log(10)
        lines.append(f"-99\t{BOS}\t{self.backoff.get(BOS, 0.0) / ln10:.10f}")
        for w in self.successors:
            row = f"{self.unigram[w] / ln10:.10f}\t{w}"
            if w in self.backoff:
                row += f"\t{self.backoff[w] / ln10:.10f}"
            lines.append(row)
        lines.append("")
        lines.append("\\2-grams:")
        for h in self.histories:
            for w, lp in self.bigram.get(h, {}).items():
                lines.append(f"{lp / ln10:.10f}\t{h} {w}")
        lines.append("")
        lines.append("\\end\\")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_arpa(cls, text: str) -> "BigramLm":
        ln10 = math.log(10)
        section = None
        unigram: dict[str, float] = {}
        backoff: dict[str, float] = {}
        bigram: dict[str, dict[str, float]] = defaultdict(dict)
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("\\"):
                section = line
                continue
            if section == "\\1-grams:":
                parts = line.split()
                lp, w = float(parts[0]), parts[1]
                if w != BOS:
                    unigram[w] = lp * ln10
                if len(parts) > 2:
                    backoff[w] = float(parts[2]) * ln10
            elif section == "\\2-grams:":
                lp, h, w = line.split()
                bigram[h][w] = float(lp) * ln10
        if EOS not in unigram:
            raise LexiconError("malformed LM: missing </s> unigram")
        vocab = [w for w in unigram if w != EOS]
        return cls(vocab, unigram, dict(bigram), backoff)


def train_bigram_lm(transcripts: Iterable[Sequence[str]], k: float = 0.5,
                    vocab: Iterable[str] | None = None) -> BigramLm:
    """Add-k bigram estimate that backs off to an add-k unigram.

    The ``k * V`` pseudo-counts of each history are spread over successors in
    proportion to the unigram distribution, which reduces to plain add-k when
    the unigram is uniform and makes the unseen mass an exact backoff weight.
    """
    sentences = [list(s) for s in transcripts]
    if not sentences or not any(sentences):
        raise LexiconError("cannot train a language model on empty input")
    words = list(dict.fromkeys(w for s in sentences for w in s))
    if vocab is not None:
        words = list(dict.fromkeys(list(vocab) + words))
    succ = words + [EOS]
    V = len(succ)

    uni = Counter()
    bi: dict[str, Counter] = defaultdict(Counter)
    for s in sentences:
        h = BOS
        for w in s + [EOS]:
            uni[w] += 1
            bi[h][w] += 1
            h = w
    n = sum(uni.values())
    uni_p = {w: (uni[w] + k) / (n + k * V) for w in succ}
    unigram = {w: math.log(p) for w, p in uni_p.items()}

    bigram: dict[str, dict[str, float]] = {}
    backoff: dict[str, float] = {}
    for h in [BOS] + words:
        counts = bi.get(h)
        if not counts:
            continue
        denom = sum(counts.values()) + k * V
        bigram[h] = {
            w: math.log((c + k * V * uni_p[w]) / denom) for w, c in counts.items()
        }
        backoff[h] = math.log(k * V / denom)
    return BigramLm(words, unigram, bigram, backoff)


def lexicon_for_prototypes(n_words: int, units: Sequence[str], rng: np.random.Generator,
                           min_len: int = 1, max_len: int = 4, kind: str = PHONEME) -> Lexicon:
    """Random dictionary of distinct pronunciations over ``units``.

    Adjacent units inside a word are always different.
    """
    units = list(units)
    if len(units) < 2:
        raise LexiconError("need at least two units to build words")
    seen: set[tuple[str, ...]] = set()
    entries: dict[str, list[tuple[str, ...]]] = {}
    attempts = 0
    while len(entries) < n_words:
        attempts += 1
        if attempts > 1000 * n_words:
            raise LexiconError("could not draw enough distinct pronunciations")
        length = int(rng.integers(min_len, max_len + 1))
        pron = [units[int(rng.integers(len(units)))]]
        while len(pron) < length:
            u = units[int(rng.integers(len(units)))]
            if u != pron[-1]:
                pron.append(u)
        p = tuple(pron)
        if p in seen:
            continue
        seen.add(p)
        entries[f"W{len(entries):03d}"] = [p]
    return Lexicon(entries, kind)
