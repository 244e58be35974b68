"""Brute-force cosine retrieval, the 1-NN caption baseline, and consensus captions.

The index is exact (dense matrix, no approximation) and immutable after
construction, so concurrent queries are safe; ties are always broken by
ascending image id so results are reproducible.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from random import Random

import numpy as np

from .errors import DimensionMismatch, EmptyIndex, EmptyPool, NoCaptions, ZeroVector

DEFAULT_NEIGHBORS = 90
DEFAULT_SIMILAR_CAPTIONS = 125
DEFAULT_MAX_ORDER = 4


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two equal-length nonzero vectors."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape or va.ndim != 1:
        raise DimensionMismatch(f"cosine needs equal-length vectors, got {va.shape} and {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for zero vectors")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


class FeatureIndex:
    """L2-normalized row matrix over image ids, sorted by ascending id."""

    def __init__(self, ids, vectors):
        id_list = [int(i) for i in ids]
        if len(set(id_list)) != len(id_list):
            raise ValueError("feature index ids must be unique")
        mat = np.asarray(vectors, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != len(id_list):
            raise DimensionMismatch(
                f"expected a ({len(id_list)}, dim) matrix, got shape {mat.shape}"
            )
        order = np.argsort(np.asarray(id_list, dtype=np.int64), kind="stable")
        self.ids = np.asarray(id_list, dtype=np.int64)[order]
        mat = mat[order]
        norms = np.linalg.norm(mat, axis=1)
        if mat.shape[0] and not np.all(norms > 0.0):
            bad = int(self.ids[int(np.argmin(norms))])
            raise ZeroVector(f"image {bad} has a zero feature vector")
        self.unit_vectors = mat / norms[:, None] if mat.shape[0] else mat
        self.dim = int(mat.shape[1]) if mat.ndim == 2 else 0
        self.unit_vectors.flags.writeable = False

    @classmethod
    def from_store(cls, store, image_ids=None) -> "FeatureIndex":
        ids = sorted(store.ids() if image_ids is None else (int(i) for i in image_ids))
        vectors = np.stack([store.get(i) for i in ids]) if ids else np.zeros((0, store.dim))
        return cls(ids, vectors)

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass(frozen=True)
class NeighborList:
    """(image_id, similarity) pairs sorted by similarity desc, id asc."""

    entries: tuple[tuple[int, float], ...]

    def ids(self) -> list[int]:
        return [image_id for image_id, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def nearest(index: FeatureIndex, query, k: int) -> NeighborList:
    """Top-``k`` index entries by cosine similarity to ``query``.

    Returns the whole index when ``k`` exceeds its size. Ties are broken by
    ascending image id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise EmptyIndex("cannot query an empty feature index")
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise DimensionMismatch(f"query has shape {q.shape}, index dim is {index.dim}")
    qnorm = float(np.linalg.norm(q))
    if qnorm == 0.0:
        raise ZeroVector("query vector is zero")
    sims = index.unit_vectors @ (q / qnorm)
    sims = np.clip(sims, -1.0, 1.0)
    order = np.lexsort((index.ids, -sims))[: min(k, len(index))]
    entries = tuple((int(index.ids[i]), float(sims[i])) for i in order)
    return NeighborList(entries)


def one_nn_caption(index: FeatureIndex, captions, query, rng_seed: int) -> tuple[str, ...]:
    """Uniformly pick one caption of the single most similar image.

    ``captions`` maps image_id to a list of token sequences. Deterministic
    given ``rng_seed``.
    """
    top = nearest(index, query, 1).entries[0][0]
    pool = captions.get(top)
    if not pool:
        raise NoCaptions(f"nearest image {top} has no captions")
    return tuple(pool[Random(rng_seed).randrange(len(pool))])


def _ngram_counts(tokens, max_n: int) -> list[tuple[Counter, int]]:
    """Per order n=1..max_n: (n-gram Counter, total n-gram count)."""
    out = []
    toks = tuple(tokens)
    for n in range(1, max_n + 1):
        total = max(len(toks) - n + 1, 0)
        grams = Counter(toks[i:i + n] for i in range(total))
        out.append((grams, total))
    return out


def _fscore_from_counts(counts_a, counts_b) -> float:
    used = 0
    total_f = 0.0
    for (grams_a, total_a), (grams_b, total_b) in zip(counts_a, counts_b):
        if total_a == 0 and total_b == 0:
            continue
        used += 1
        matched = sum((grams_a & grams_b).values())
        precision = matched / total_a if total_a else 0.0
        recall = matched / total_b if total_b else 0.0
        if precision + recall > 0.0:
            total_f += 2.0 * precision * recall / (precision + recall)
    return total_f / used if used else 0.0


def ngram_overlap_fscore(a, b, max_n: int = DEFAULT_MAX_ORDER) -> float:
    """Mean over n=1..max_n of the harmonic-mean F between clipped n-gram
    precision and recall of ``a`` against ``b``.

    Symmetric in its arguments; orders where neither side has any n-gram
    are skipped; empty inputs score 0.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    return _fscore_from_counts(_ngram_counts(a, max_n), _ngram_counts(b, max_n))


@dataclass(frozen=True)
class ConsensusResult:
    caption: tuple[str, ...]
    mean_overlap: float
    candidate_pool_size: int


def consensus_caption(pool, m: int = DEFAULT_SIMILAR_CAPTIONS,
                      max_n: int = DEFAULT_MAX_ORDER) -> ConsensusResult:
    """Pick the pool caption with the highest mean n-gram overlap with its
    ``m`` most-overlapping pool mates.

    Ties go to the earliest caption in pool order. A single-caption pool
    returns that caption with overlap 0.
    """
    captions = [tuple(c) for c in pool]
    if not captions:
        raise EmptyPool("consensus over an empty caption pool")
    if m < 1:
        raise ValueError("m must be >= 1")
    if len(captions) == 1:
        return ConsensusResult(captions[0], 0.0, 1)
    counts = [_ngram_counts(c, max_n) for c in captions]
    keep = min(m, len(captions) - 1)
    best_idx = 0
    best_mean = float("-inf")
    for i in range(len(captions)):
        overlaps = sorted(
            (_fscore_from_counts(counts[i], counts[j]) for j in range(len(captions)) if j != i),
            reverse=True,
        )[:keep]
        mean = sum(overlaps) / len(overlaps)
        if mean > best_mean:
            best_mean = mean
            best_idx = i
    return ConsensusResult(captions[best_idx], best_mean, len(captions))


def neighbor_caption_pool(index: FeatureIndex, captions, query,
                          k: int = DEFAULT_NEIGHBORS) -> list[tuple[str, ...]]:
    """Union of the captions of the ``k`` nearest images, in neighbor order."""
    pool: list[tuple[str, ...]] = []
    for image_id in nearest(index, query, k).ids():
        for cap in captions.get(image_id, ()):
            pool.append(tuple(cap))
    return pool


def consensus_for_query(index: FeatureIndex, captions, query,
                        k: int = DEFAULT_NEIGHBORS,
                        m: int = DEFAULT_SIMILAR_CAPTIONS,
                        max_n: int = DEFAULT_MAX_ORDER) -> ConsensusResult:
    """Consensus caption over the pooled captions of the k nearest images."""
    pool = neighbor_caption_pool(index, captions, query, k)
    return consensus_caption(pool, m, max_n)
