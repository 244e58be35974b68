"""Diagnostics: caption repetition statistics and train/test visual-overlap bins.

Caption equality is judged on the space-joined token sequence, so
punctuation or casing noise in the raw strings cannot hide duplicates.
Everything here is a pure function over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, MissingReferences, ZeroVector
from .metrics import BleuStats, bleu_from_stats, bleu_stats

BIN_LEAST = "least"
BIN_MIDDLE = "middle"
BIN_MOST = "most"
DEFAULT_TOP_K = 50
DEFAULT_TAIL_FRACTION = 0.2


@dataclass(frozen=True)
class RepetitionReport:
    """How repetitive generated captions are, and how many were memorized."""

    total: int
    unique: int
    seen_in_training: int

    @property
    def unique_fraction(self) -> float:
        return self.unique / self.total

    @property
    def seen_in_training_fraction(self) -> float:
        return self.seen_in_training / self.total


def repetition_stats(generated, training_captions) -> RepetitionReport:
    """Distinct-caption and seen-in-training fractions of generated captions.

    ``generated`` maps image ids to token sequences; ``training_captions``
    is any iterable of token sequences.
    """
    if not generated:
        raise ValueError("repetition_stats needs at least one generated caption")
    strings = [" ".join(tokens) for tokens in generated.values()]
    training = {" ".join(tokens) for tokens in training_captions}
    seen = sum(1 for s in strings if s in training)
    return RepetitionReport(len(strings), len(set(strings)), seen)


@dataclass(frozen=True)
class OverlapBinAssignment:
    """Per test image: mean similarity to its closest training images, and
    membership in the least / middle / most overlapping bin."""

    mean_similarity: dict[int, float]
    bin_of: dict[int, str]

    def images_in(self, bin_name: str) -> list[int]:
        return sorted(i for i, b in self.bin_of.items() if b == bin_name)


def _unit_rows(store, label: str) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(sorted(store.ids()), dtype=np.int64)
    mat = np.stack([np.asarray(store.get(int(i)), dtype=np.float64) for i in ids])
    norms = np.linalg.norm(mat, axis=1)
    if not np.all(norms > 0.0):
        bad = int(ids[int(np.argmin(norms))])
        raise ZeroVector(f"{label} image {bad} has a zero feature vector")
    return ids, mat / norms[:, None]


def overlap_bins(test_features, train_features, top_k: int = DEFAULT_TOP_K,
                 tail_fraction: float = DEFAULT_TAIL_FRACTION) -> OverlapBinAssignment:
    """Bin test images by mean cosine similarity to their ``top_k`` closest
    training images.

    After sorting ascending by that mean (ties by ascending image id), the
    lowest ``floor(tail_fraction * N)`` images land in the "least" bin and
    the highest in the "most" bin. ``top_k`` is capped at the training-set
    size.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if not 0.0 < tail_fraction <= 0.5:
        raise ValueError("tail_fraction must be in (0, 0.5]")
    if test_features.dim != train_features.dim:
        raise DimensionMismatch(
            f"test dim {test_features.dim} != train dim {train_features.dim}"
        )
    test_ids, test_unit = _unit_rows(test_features, "test")
    train_ids, train_unit = _unit_rows(train_features, "train")
    k = min(top_k, len(train_ids))
    sims = np.clip(test_unit @ train_unit.T, -1.0, 1.0)
    top_means = np.sort(sims, axis=1)[:, -k:].mean(axis=1)
    order = np.lexsort((test_ids, top_means))
    n_tail = int(len(test_ids) * tail_fraction)
    bin_of: dict[int, str] = {}
    for pos, idx in enumerate(order):
        if pos < n_tail:
            name = BIN_LEAST
        elif pos >= len(order) - n_tail:
            name = BIN_MOST
        else:
            name = BIN_MIDDLE
        bin_of[int(test_ids[idx])] = name
    means = {int(i): float(m) for i, m in zip(test_ids, top_means)}
    return OverlapBinAssignment(means, bin_of)


def binned_bleu(generated, refs, bins: OverlapBinAssignment) -> dict[str, float]:
    """Corpus BLEU computed independently inside each overlap bin.

    Raises MissingReferences when a generated image lacks references or a
    bin assignment. Bins with no images are omitted from the result.
    """
    totals: dict[str, BleuStats] = {}
    for image_id, tokens in generated.items():
        if image_id not in refs:
            raise MissingReferences(f"no references for image {image_id}")
        if image_id not in bins.bin_of:
            raise MissingReferences(f"no overlap bin for image {image_id}")
        name = bins.bin_of[image_id]
        totals[name] = totals.get(name, BleuStats()) + bleu_stats(tokens, refs[image_id])
    return {name: bleu_from_stats(stats) for name, stats in sorted(totals.items())}
