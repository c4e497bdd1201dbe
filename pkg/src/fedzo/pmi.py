"""Prompt vocabulary construction by PMI segmentation of a corpus."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

NEG_INF = float("-inf")


@dataclass(frozen=True)
class NgramCounts:
    unigram: Counter
    bigram: Counter
    total_unigrams: int
    total_bigrams: int

    @classmethod
    def from_corpus(cls, corpus: Iterable[Sequence[str]]) -> "NgramCounts":
        uni: Counter = Counter()
        bi: Counter = Counter()
        for sent in corpus:
            uni.update(sent)
            bi.update(zip(sent, sent[1:]))
        return cls(uni, bi, sum(uni.values()), sum(bi.values()))


@dataclass(frozen=True)
class Vocabulary:
    entries: tuple[str, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("vocabulary is empty")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("vocabulary entries must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {"entries": list(self.entries)}


def tokenize(line: str) -> list[str]:
    return line.lower().split()


def pmi_score(counts: NgramCounts, left: str, right: str) -> float:
    """Natural-log PMI of an adjacent pair; ``-inf`` if the pair never occurs."""
    for tok in (left, right):
        if counts.unigram.get(tok, 0) <= 0:
            raise KeyError(f"unseen token {tok!r}")
    joint = counts.bigram.get((left, right), 0)
    if joint == 0 or counts.total_bigrams == 0:
        return NEG_INF
    p_joint = joint / counts.total_bigrams
    p_left = counts.unigram[left] / counts.total_unigrams
    p_right = counts.unigram[right] / counts.total_unigrams
    return math.log(p_joint / (p_left * p_right))


def split_points(sentence: Sequence[str], counts: NgramCounts, threshold: float) -> list[int]:
    """Positions ``i`` where a boundary falls between ``sentence[i-1]`` and ``sentence[i]``."""
    return [
        i
        for i in range(1, len(sentence))
        if pmi_score(counts, sentence[i - 1], sentence[i]) < threshold
    ]


def segment_sentence(sentence: Sequence[str], counts: NgramCounts, threshold: float) -> list[str]:
    cuts = [0, *split_points(sentence, counts, threshold), len(sentence)]
    return [" ".join(sentence[a:b]) for a, b in zip(cuts, cuts[1:]) if b > a]


def count_boundaries(corpus: Sequence[Sequence[str]], threshold: float) -> int:
    counts = NgramCounts.from_corpus(corpus)
    return sum(len(split_points(s, counts, threshold)) for s in corpus)


def segment(corpus: Sequence[Sequence[str]], threshold: float, size: int = 200) -> Vocabulary:
    """Segment every sentence and keep the ``size`` most frequent n-grams.

    Ties in frequency keep first-occurrence order.
    """
    corpus = [list(s) for s in corpus if len(s)]
    if not corpus:
        raise ValueError("corpus is empty")
    if size < 1:
        raise ValueError("vocabulary size must be >= 1")
    counts = NgramCounts.from_corpus(corpus)
    freq: Counter = Counter()
    first: dict[str, int] = {}
    for sent in corpus:
        for gram in segment_sentence(sent, counts, threshold):
            freq[gram] += 1
            first.setdefault(gram, len(first))
    ranked = sorted(freq, key=lambda g: (-freq[g], first[g]))
    return Vocabulary(tuple(ranked[:size]))
