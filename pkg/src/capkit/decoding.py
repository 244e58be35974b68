"""Beam-search decoding over any next-word scorer, plain or coverage-constrained.

The search is length-synchronous: at every step each live hypothesis is
expanded over the full candidate set and the best ``beam_size`` expansions
overall are kept; those ending in END retire into the n-best pool (so a
beam of one is exactly greedy decoding) and the rest stay live. Ties are
broken by the candidate-index sequence, so decoding is fully
deterministic. In coverage mode each hypothesis tracks the detection words
it has not yet mentioned; END only becomes admissible once the mentioned
count reaches ``min_coverage``.

A scorer provides three methods (duck-typed, see MaxEntScorer and
RecurrentScorer): ``start(conditioning)`` builds an opaque state,
``logprobs(state, remaining)`` returns log-probabilities aligned with
``scorer.candidates`` (END included), and ``advance(state, token,
remaining)`` consumes an emitted token. Decoding never mutates the model,
so one model may serve many images concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .corpus import END_TOKEN, START_ID, UNK_TOKEN
from .errors import ToolkitError
from .maxent import MaxEntLM
from .recurrent import MODE_COVERAGE_AUX, RecurrentLM

DEFAULT_BEAM_SIZE = 10
DEFAULT_NBEST = 500
DEFAULT_MAX_LEN = 16


@dataclass(frozen=True)
class BeamHypothesis:
    """One search hypothesis: live while unfinished, retired once END is emitted.

    ``key`` is the candidate-index sequence used for deterministic
    tie-breaking and ``state`` the scorer's opaque per-hypothesis state
    (None once finished).
    """

    tokens: tuple[str, ...]
    logprob: float
    remaining: frozenset[str]
    finished: bool = False
    key: tuple[int, ...] = ()
    state: object = None


@dataclass(frozen=True)
class DecodedHypothesis:
    tokens: tuple[str, ...]
    logprob: float
    features: dict[str, float]


@dataclass
class NBestList:
    """Ranked hypotheses for one image with shared named feature rows.

    ``complete`` is False when no hypothesis reached END (or coverage) in
    time and the entries are best-effort partials.
    """

    image_id: int
    hypotheses: list[DecodedHypothesis] = field(default_factory=list)
    complete: bool = True


class MaxEntScorer:
    """Adapts a MaxEntLM to the decoder interface (state = history tuple)."""

    def __init__(self, lm: MaxEntLM):
        self.lm = lm
        self.candidates = lm.candidate_tokens()

    def start(self, conditioning):
        return ()

    def logprobs(self, history, remaining):
        return self.lm.logprobs(list(history), remaining or frozenset())

    def advance(self, history, token, remaining):
        return history + (token,)


class RecurrentScorer:
    """Adapts a RecurrentLM to the decoder interface.

    State is (hidden vector, previous token id). In auxiliary mode the
    remaining set is re-encoded each step; in initial_state mode it is
    ignored and ``start`` expects the image feature vector.
    """

    def __init__(self, lm: RecurrentLM):
        self.lm = lm
        vocab = lm.vocabulary
        self.candidates = vocab.candidate_tokens()

    def start(self, conditioning):
        h0, _ = self.lm.initial_hidden(conditioning)
        return (h0, START_ID)

    def _remaining_ids(self, remaining):
        if self.lm.mode != MODE_COVERAGE_AUX:
            return None
        return self.lm.encode_detections(remaining or frozenset())

    def logprobs(self, state, remaining):
        h_prev, prev_id = state
        _, lps = self.lm.step(h_prev, prev_id, self._remaining_ids(remaining))
        return lps

    def advance(self, state, token, remaining):
        h_prev, prev_id = state
        h, _ = self.lm.step(h_prev, prev_id, self._remaining_ids(remaining))
        return (h, self.lm.vocabulary.lookup(token))


def _search(scorer, conditioning, beam_size, max_len, n_best, detections, min_coverage,
            image_id):
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if n_best < 1:
        raise ValueError("n_best must be >= 1")
    coverage_mode = detections is not None
    detected = frozenset(detections.tokens()) if coverage_mode else frozenset()
    if coverage_mode:
        if min_coverage is None:
            min_coverage = min(len(detected), max_len - 1)
        if min_coverage > len(detected):
            raise ToolkitError(
                f"min_coverage {min_coverage} exceeds detection count {len(detected)}"
            )
    candidates = scorer.candidates
    try:
        end_index = candidates.index(END_TOKEN)
    except ValueError as exc:
        raise ToolkitError("scorer candidates must include the END token") from exc

    live = [BeamHypothesis((), 0.0, detected, state=scorer.start(conditioning))]
    pool: list[BeamHypothesis] = []
    for _ in range(max_len):
        expansions = []
        for hyp in live:
            lps = scorer.logprobs(hyp.state, hyp.remaining if coverage_mode else None)
            end_ok = (not coverage_mode) or (
                len(detected) - len(hyp.remaining) >= min_coverage
            )
            for ci, logprob in enumerate(lps):
                if ci == end_index and not end_ok:
                    continue
                expansions.append((hyp.logprob + float(logprob), hyp.key + (ci,), hyp, ci))
        if not expansions:
            break
        expansions.sort(key=lambda e: (-e[0], e[1]))
        new_live: list[BeamHypothesis] = []
        for logprob, key, hyp, ci in expansions[:beam_size]:
            if ci == end_index:
                pool.append(
                    BeamHypothesis(hyp.tokens, logprob, hyp.remaining,
                                   finished=True, key=key)
                )
            else:
                token = candidates[ci]
                state = scorer.advance(
                    hyp.state, token, hyp.remaining if coverage_mode else None
                )
                new_live.append(
                    BeamHypothesis(hyp.tokens + (token,), logprob,
                                   hyp.remaining - {token}, key=key, state=state)
                )
        live = new_live
        if not live:
            break

    def to_decoded(hyp: BeamHypothesis) -> DecodedHypothesis:
        row = {"logprob": float(hyp.logprob), "length": float(len(hyp.tokens))}
        if coverage_mode:
            row["covered"] = float(len(detected) - len(hyp.remaining))
        return DecodedHypothesis(hyp.tokens, float(hyp.logprob), row)

    if pool:
        pool.sort(key=lambda h: (-h.logprob, h.key))
        return NBestList(image_id, [to_decoded(h) for h in pool[:n_best]], complete=True)
    return NBestList(image_id, [to_decoded(h) for h in live[:n_best]], complete=False)


def beam_search(scorer, conditioning, beam_size: int = DEFAULT_BEAM_SIZE,
                max_len: int = DEFAULT_MAX_LEN, n_best: int = 1,
                image_id: int = 0) -> NBestList:
    """Plain beam search; emits up to ``max_len`` tokens, END included.

    When no hypothesis produces END within ``max_len`` steps, the best
    partials are returned with ``complete=False``.
    """
    return _search(scorer, conditioning, beam_size, max_len, n_best,
                   detections=None, min_coverage=None, image_id=image_id)


def coverage_beam_search(scorer, detections, beam_size: int = DEFAULT_BEAM_SIZE,
                         max_len: int = DEFAULT_MAX_LEN, n_best: int = DEFAULT_NBEST,
                         min_coverage: int | None = None,
                         image_id: int | None = None) -> NBestList:
    """Beam search that must mention at least ``min_coverage`` detected words.

    Each hypothesis tracks the detection words it has not yet emitted and
    the scorer sees that set every step; END is only admissible once
    enough words are covered. ``min_coverage`` defaults to all detected
    words, capped at ``max_len - 1``. Feature rows gain a ``covered``
    column. If coverage is unreachable within ``max_len``, best-effort
    partials come back with ``complete=False``.
    """
    if image_id is None:
        image_id = detections.image_id
    return _search(scorer, detections, beam_size, max_len, n_best,
                   detections=detections, min_coverage=min_coverage,
                   image_id=image_id)


def rescore_logprob(nbest: NBestList, scorer, conditioning, feature_name: str) -> NBestList:
    """Add a feature column with another model's log-probability per hypothesis."""
    rescored = []
    index_of = {tok: i for i, tok in enumerate(scorer.candidates)}
    unk_index = index_of.get(UNK_TOKEN)
    for hyp in nbest.hypotheses:
        state = scorer.start(conditioning)
        total = 0.0
        for token in [*hyp.tokens, END_TOKEN]:
            lps = scorer.logprobs(state, None)
            total += float(lps[index_of.get(token, unk_index)])
            if token != END_TOKEN:
                state = scorer.advance(state, token, None)
        row = dict(hyp.features)
        row[feature_name] = total
        rescored.append(DecodedHypothesis(hyp.tokens, hyp.logprob, row))
    return NBestList(nbest.image_id, rescored, complete=nbest.complete)
