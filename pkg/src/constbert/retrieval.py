"""Exhaustive MaxSim search, candidate reranking and a lexical first stage."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .index import Index
from .scoring import ShapeError, as_embeddings

SCAN_CHUNK = 4096


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: int
    external_id: str
    score: float


@dataclass
class CandidateList:
    query_id: str
    doc_ids: list[str] = field(default_factory=list)
    # set when the query shares no token with the corpus
    no_match: bool = False


class UnknownCandidateError(KeyError):
    pass


def top_k(scores: np.ndarray, doc_ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the best ``k`` entries ordered by (score desc, doc_id asc)."""
    n = scores.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if k < n:
        # keep every entry tied with the k-th best so the tie-break stays exact
        kth = np.partition(scores, n - k)[n - k]
        pool = np.flatnonzero(scores >= kth)
    else:
        pool = np.arange(n)
    order = np.lexsort((doc_ids[pool], -scores[pool]))
    return pool[order[:k]]


def _to_results(index: Index, doc_ids: np.ndarray, scores: np.ndarray, k: int) -> list[ScoredDoc]:
    sel = top_k(scores, doc_ids, k)
    ids = index.ids
    return [ScoredDoc(int(doc_ids[p]), ids[int(doc_ids[p])], float(scores[p])) for p in sel]


def _check_query(index: Index, query) -> np.ndarray:
    q = as_embeddings(query, name="query")
    if q.shape[1] != index.dim:
        raise ShapeError(f"query dim {q.shape[1]} != index dim {index.dim}")
    return q


class ScanStats:
    """Counts of record decodes and MaxSim evaluations (for throughput accounting)."""

    def __init__(self):
        self.decoded = 0
        self.scored = 0


def score_all(index: Index, query, *, parallel: bool = False, stats: ScanStats | None = None) -> np.ndarray:
    """MaxSim of ``query`` against every record, in doc_id order."""
    q = _check_query(index, query)
    out = np.empty(index.num_docs, dtype=np.float64)
    for lo in range(0, index.num_docs, SCAN_CHUNK):
        hi = min(lo + SCAN_CHUNK, index.num_docs)
        block = index.decode_range(lo, hi)
        out[lo:hi] = _kernels.backend.scan_fixed(q, block, parallel=parallel)
        if stats is not None:
            stats.decoded += hi - lo
            stats.scored += hi - lo
    return out


def search_exact(
    index: Index, query, topk: int, *, parallel: bool = False, stats: ScanStats | None = None
) -> list[ScoredDoc]:
    if topk < 1:
        raise ValueError(f"topk must be >= 1, got {topk}")
    scores = score_all(index, query, parallel=parallel, stats=stats)
    return _to_results(index, np.arange(index.num_docs), scores, topk)


def rerank(
    index: Index,
    query,
    candidates: CandidateList | Sequence[str],
    topk: int,
    *,
    lenient: bool = False,
    stats: ScanStats | None = None,
) -> list[ScoredDoc]:
    """Score only the candidate documents; same ordering contract as ``search_exact``.

    Unknown external ids raise ``UnknownCandidateError`` unless ``lenient``.
    """
    if topk < 1:
        raise ValueError(f"topk must be >= 1, got {topk}")
    q = _check_query(index, query)
    ext_ids = candidates.doc_ids if isinstance(candidates, CandidateList) else list(candidates)
    internal: list[int] = []
    seen: set[int] = set()
    for ext in ext_ids:
        i = index.internal_id(ext)
        if i is None:
            if lenient:
                continue
            raise UnknownCandidateError(f"candidate {ext!r} is not in the index")
        if i not in seen:
            seen.add(i)
            internal.append(i)
    if not internal:
        return []
    doc_ids = np.asarray(internal, dtype=np.int64)
    block = index.decode_ids(doc_ids)
    scores = _kernels.backend.scan_fixed(q, block)
    if stats is not None:
        stats.decoded += len(internal)
        stats.scored += len(internal)
    return _to_results(index, doc_ids, scores, topk)


class OverlapRetriever:
    """Lexical first stage: sum of idf over distinct tokens shared with the query.

    ``idf(t) = ln(1 + (num_docs - df + 0.5) / (df + 0.5))``.
    """

    def __init__(self, corpus_tokens: Sequence[Iterable[int]], doc_ids: Sequence[str] | None = None):
        self.num_docs = len(corpus_tokens)
        self.doc_ids = list(doc_ids) if doc_ids is not None else [str(i) for i in range(self.num_docs)]
        if len(self.doc_ids) != self.num_docs:
            raise ValueError("doc_ids and corpus_tokens differ in length")
        postings: dict[int, list[int]] = defaultdict(list)
        for d, toks in enumerate(corpus_tokens):
            for t in sorted(set(toks)):
                postings[t].append(d)
        self.postings = {t: np.asarray(p, dtype=np.int64) for t, p in postings.items()}

    def idf(self, token: int) -> float:
        df = len(self.postings.get(token, ()))
        return math.log(1.0 + (self.num_docs - df + 0.5) / (df + 0.5))

    def scores(self, query_tokens: Iterable[int]) -> np.ndarray:
        acc = np.zeros(self.num_docs, dtype=np.float64)
        for t in sorted(set(query_tokens)):
            post = self.postings.get(t)
            if post is not None:
                acc[post] += self.idf(t)
        return acc

    def candidates(self, query_id: str, query_tokens: Sequence[int], topk: int) -> CandidateList:
        if len(query_tokens) == 0:
            raise ValueError(f"query {query_id!r} is empty")
        if topk < 1:
            raise ValueError(f"topk must be >= 1, got {topk}")
        acc = self.scores(query_tokens)
        hit = np.flatnonzero(acc > 0)
        if hit.size == 0:
            return CandidateList(query_id, [], no_match=True)
        sel = hit[top_k(acc[hit], hit, topk)]
        return CandidateList(query_id, [self.doc_ids[i] for i in sel])


def first_stage_overlap(
    corpus_tokens: Sequence[Iterable[int]],
    query_tokens: Sequence[int],
    topk: int,
    *,
    query_id: str = "q",
    doc_ids: Sequence[str] | None = None,
) -> CandidateList:
    return OverlapRetriever(corpus_tokens, doc_ids).candidates(query_id, query_tokens, topk)
