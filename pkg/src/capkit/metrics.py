"""Corpus BLEU, a lightweight METEOR-style metric, and perplexity.

BLEU is computed from additive sufficient statistics so corpus scores can
be assembled from any partition of the data; the brevity penalty uses the
reference whose length is closest to the hypothesis (ties toward the
shorter reference). All functions here are pure.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import (
    EmptyHypothesis,
    EmptyReferences,
    NonFiniteLogProb,
)

BLEU_MAX_ORDER = 4


@dataclass(frozen=True)
class BleuStats:
    """Additive BLEU sufficient statistics for orders 1..4.

    ``matches[n-1]`` are the clipped n-gram matches, ``hyp_ngrams[n-1]``
    the hypothesis n-gram totals. Integer fields make addition exact.
    """

    matches: tuple[int, int, int, int] = (0, 0, 0, 0)
    hyp_ngrams: tuple[int, int, int, int] = (0, 0, 0, 0)
    hyp_len: int = 0
    closest_ref_len: int = 0

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(
            tuple(a + b for a, b in zip(self.matches, other.matches)),
            tuple(a + b for a, b in zip(self.hyp_ngrams, other.hyp_ngrams)),
            self.hyp_len + other.hyp_len,
            self.closest_ref_len + other.closest_ref_len,
        )

    def as_tuple(self) -> tuple[int, ...]:
        return (*self.matches, *self.hyp_ngrams, self.hyp_len, self.closest_ref_len)

    @classmethod
    def from_tuple(cls, values) -> "BleuStats":
        values = tuple(int(v) for v in values)
        return cls(values[0:4], values[4:8], values[8], values[9])


def _ngrams(tokens, n: int) -> Counter:
    toks = tuple(tokens)
    return Counter(toks[i:i + n] for i in range(len(toks) - n + 1))


def bleu_stats(hyp, refs) -> BleuStats:
    """Per-sentence statistics of ``hyp`` against multiple references.

    Match counts are clipped against the per-n-gram maximum over the
    references; the reference-length term picks the reference closest in
    length to the hypothesis, preferring the shorter one on ties.
    """
    refs = [tuple(r) for r in refs]
    if not refs:
        raise EmptyReferences("bleu_stats needs at least one reference")
    hyp = tuple(hyp)
    matches = []
    totals = []
    for n in range(1, BLEU_MAX_ORDER + 1):
        hyp_grams = _ngrams(hyp, n)
        totals.append(sum(hyp_grams.values()))
        if not hyp_grams:
            matches.append(0)
            continue
        max_ref = Counter()
        for ref in refs:
            max_ref |= _ngrams(ref, n)
        matches.append(sum((hyp_grams & max_ref).values()))
    closest = min((len(r) for r in refs), key=lambda L: (abs(L - len(hyp)), L))
    return BleuStats(tuple(matches), tuple(totals), len(hyp), closest)


def bleu_from_stats(stats: BleuStats) -> float:
    """Corpus BLEU on a 0-100 scale from accumulated statistics.

    Geometric mean of the clipped precisions over the orders the
    hypothesis actually has n-grams for, times the brevity penalty
    min(1, exp(1 - r/c)). Any zero precision yields 0 (no smoothing).
    """
    if stats.hyp_len <= 0:
        raise EmptyHypothesis("corpus BLEU needs at least one hypothesis token")
    log_sum = 0.0
    orders = 0
    for matched, total in zip(stats.matches, stats.hyp_ngrams):
        if total == 0:
            continue
        if matched == 0:
            return 0.0
        log_sum += math.log(matched / total)
        orders += 1
    bp = 1.0 if stats.hyp_len >= stats.closest_ref_len else math.exp(
        1.0 - stats.closest_ref_len / stats.hyp_len
    )
    return 100.0 * bp * math.exp(log_sum / orders)


def corpus_bleu(pairs) -> float:
    """BLEU over an iterable of (hypothesis tokens, reference list) pairs."""
    total = BleuStats()
    for hyp, refs in pairs:
        total = total + bleu_stats(hyp, refs)
    return bleu_from_stats(total)


@dataclass(frozen=True)
class MeteorConfig:
    """Knobs of the unigram-alignment metric.

    alpha weighs precision against recall in the harmonic mean, gamma and
    beta shape the fragmentation penalty gamma*(chunks/matches)**beta.
    """

    alpha: float = 0.9
    beta: float = 3.0
    gamma: float = 0.5
    stemmer: bool = True
    synonyms: dict[str, frozenset[str]] | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")


_STEM_SUFFIXES = ("sses", "ies", "ing", "ed", "es", "s")


def light_stem(token: str) -> str:
    """Tiny suffix-stripping stemmer used to extend exact unigram matches."""
    if token.endswith("sses"):
        return token[:-2]
    if token.endswith("ies") and len(token) > 4:
        return token[:-3] + "y"
    for suffix in ("ing", "ed", "es"):
        if token.endswith(suffix) and len(token) - len(suffix) >= 3:
            return token[: -len(suffix)]
    if token.endswith("s") and not token.endswith("ss") and len(token) > 3:
        return token[:-1]
    return token


def _synonym_match(a: str, b: str, synonyms) -> bool:
    if synonyms is None:
        return False
    return b in synonyms.get(a, ()) or a in synonyms.get(b, ())


def _align(hyp, ref, config: MeteorConfig) -> tuple[int, int]:
    """Stage-wise unigram alignment; returns (matches, chunks).

    Stages run exact, then stemmed, then synonym matching; within a stage
    each hypothesis token takes the first free reference token, which keeps
    the alignment order-preserving per word type.
    """
    stages = [lambda a, b: a == b]
    if config.stemmer:
        stages.append(lambda a, b: light_stem(a) == light_stem(b))
    if config.synonyms is not None:
        stages.append(lambda a, b: _synonym_match(a, b, config.synonyms))
    hyp_free = [True] * len(hyp)
    ref_free = [True] * len(ref)
    pairs: list[tuple[int, int]] = []
    for matches_fn in stages:
        for i, h_tok in enumerate(hyp):
            if not hyp_free[i]:
                continue
            for j, r_tok in enumerate(ref):
                if ref_free[j] and matches_fn(h_tok, r_tok):
                    pairs.append((i, j))
                    hyp_free[i] = False
                    ref_free[j] = False
                    break
    if not pairs:
        return 0, 0
    pairs.sort()
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    return len(pairs), chunks


def meteor(hyp, refs, config: MeteorConfig | None = None) -> float:
    """Best unigram-alignment score of ``hyp`` over the references, 0-100.

    F = P*R / (alpha*P + (1-alpha)*R), discounted by the fragmentation
    penalty; zero when nothing aligns.
    """
    config = config or MeteorConfig()
    refs = [tuple(r) for r in refs]
    if not refs:
        raise EmptyReferences("meteor needs at least one reference")
    hyp = tuple(hyp)
    best = 0.0
    for ref in refs:
        if not hyp or not ref:
            continue
        matched, chunks = _align(hyp, ref, config)
        if matched == 0:
            continue
        precision = matched / len(hyp)
        recall = matched / len(ref)
        fmean = (precision * recall) / (config.alpha * precision + (1.0 - config.alpha) * recall)
        penalty = config.gamma * (chunks / matched) ** config.beta
        best = max(best, 100.0 * fmean * (1.0 - penalty))
    return best


def perplexity(logprob_fn, corpus) -> float:
    """exp of the average per-token negative log-likelihood over ``corpus``.

    ``logprob_fn`` maps a caption to (total natural log-probability, token
    count); counts are expected to include the end-of-sentence token.
    """
    total_logprob = 0.0
    total_tokens = 0
    for caption in corpus:
        logprob, count = logprob_fn(caption)
        if not math.isfinite(logprob):
            raise NonFiniteLogProb(f"non-finite log-probability for caption {caption!r}")
        total_logprob += float(logprob)
        total_tokens += int(count)
    if total_tokens <= 0:
        raise EmptyHypothesis("perplexity over zero tokens")
    return math.exp(-total_logprob / total_tokens)
