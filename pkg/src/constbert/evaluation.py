"""TREC run/qrels I/O and effectiveness metrics (MRR, nDCG, recall)."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Qrels = dict  # qid -> {docid: grade}
Run = dict  # qid -> [(docid, score), ...] in rank order


class TrecFormatError(ValueError):
    pass


def load_qrels(path) -> Qrels:
    """Parse ``qid 0 docid grade`` lines; duplicate (qid, docid) pairs are rejected."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise TrecFormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, docid, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise TrecFormatError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
            if g < 0:
                raise TrecFormatError(f"{path}:{lineno}: negative grade {g}")
            per_q = qrels.setdefault(qid, {})
            if docid in per_q:
                raise TrecFormatError(f"{path}:{lineno}: duplicate judgment for ({qid}, {docid})")
            per_q[docid] = g
    return qrels


def write_qrels(path, qrels: Mapping[str, Mapping[str, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, docs in qrels.items():
            for docid, g in docs.items():
                fh.write(f"{qid} 0 {docid} {g}\n")


def load_run(path) -> Run:
    """Parse ``qid Q0 docid rank score tag`` lines.

    Ranks must run 1..n per query and scores must not increase with rank.
    """
    rows: dict[str, list[tuple[int, str, float, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise TrecFormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, docid, rank, score, _tag = parts
            try:
                r, s = int(rank), float(score)
            except ValueError:
                raise TrecFormatError(f"{path}:{lineno}: bad rank or score") from None
            rows.setdefault(qid, []).append((r, docid, s, lineno))
    run: Run = {}
    for qid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        for expect, (r, _, _, lineno) in enumerate(entries, 1):
            if r != expect:
                raise TrecFormatError(f"{path}:{lineno}: query {qid} ranks are not contiguous (found {r}, expected {expect})")
        for prev, cur in zip(entries, entries[1:]):
            if cur[2] > prev[2]:
                raise TrecFormatError(f"{path}:{cur[3]}: query {qid} score increases at rank {cur[0]}")
        run[qid] = [(docid, s) for _, docid, s, _ in entries]
    return run


def write_run(path, run: Mapping[str, Sequence[tuple[str, float]]], tag: str) -> None:
    if not tag or any(c.isspace() for c in tag):
        raise ValueError(f"invalid run tag {tag!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, docs in run.items():
            for rank, (docid, score) in enumerate(docs, 1):
                fh.write(f"{qid} Q0 {docid} {rank} {score:.6f} {tag}\n")


def _evaluated_queries(run: Mapping, qrels: Mapping) -> list[str]:
    common = [q for q in run if q in qrels]
    missing = [q for q in run if q not in qrels]
    if missing:
        logger.warning("%d run queries have no judgments and are excluded: %s", len(missing), missing[:5])
    if not common:
        raise ValueError("run and qrels share no query ids")
    return common


def _mean(values: list[float]) -> float:
    return float(sum(values) / len(values))


def per_query_rr(run, qrels, k: int = 10) -> dict[str, float]:
    out = {}
    for qid in _evaluated_queries(run, qrels):
        rel = qrels[qid]
        rr = 0.0
        for rank, (docid, _) in enumerate(run[qid][:k], 1):
            if rel.get(docid, 0) >= 1:
                rr = 1.0 / rank
                break
        out[qid] = rr
    return out


def mrr_at_k(run, qrels, k: int = 10) -> float:
    return _mean(list(per_query_rr(run, qrels, k).values()))


def per_query_ndcg(run, qrels, k: int = 10) -> dict[str, float]:
    out = {}
    for qid in _evaluated_queries(run, qrels):
        rel = qrels[qid]
        dcg = sum(
            (2.0 ** rel.get(docid, 0) - 1.0) / math.log2(rank + 1)
            for rank, (docid, _) in enumerate(run[qid][:k], 1)
        )
        ideal = sorted((g for g in rel.values() if g > 0), reverse=True)[:k]
        idcg = sum((2.0**g - 1.0) / math.log2(rank + 1) for rank, g in enumerate(ideal, 1))
        out[qid] = dcg / idcg if idcg > 0 else 0.0
    return out


def ndcg_at_k(run, qrels, k: int = 10) -> float:
    return _mean(list(per_query_ndcg(run, qrels, k).values()))


def per_query_recall(run, qrels, k: int) -> dict[str, float]:
    out = {}
    for qid in _evaluated_queries(run, qrels):
        relevant = {d for d, g in qrels[qid].items() if g >= 1}
        if not relevant:
            out[qid] = 0.0
            continue
        got = {docid for docid, _ in run[qid][:k]}
        out[qid] = len(relevant & got) / len(relevant)
    return out


def recall_at_k(run, qrels, k: int) -> float:
    return _mean(list(per_query_recall(run, qrels, k).values()))


_METRICS = {"mrr": mrr_at_k, "ndcg": ndcg_at_k, "recall": recall_at_k}
SUPPORTED_METRICS = ("mrr@K", "ndcg@K", "recall@K")
_METRIC_RE = re.compile(r"^(mrr|ndcg|recall)@([1-9][0-9]*)$")


def parse_metric(name: str) -> tuple[str, int]:
    m = _METRIC_RE.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown metric {name!r}; supported: {', '.join(SUPPORTED_METRICS)} (K a positive integer)")
    return m.group(1), int(m.group(2))


def evaluate(run, qrels, metrics: Sequence[str]) -> dict[str, float]:
    out = {}
    for name in metrics:
        fam, k = parse_metric(name)
        out[f"{fam}@{k}"] = _METRICS[fam](run, qrels, k)
    return out


@dataclass(frozen=True)
class LatencySummary:
    count: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    p99_ms: float


def mean_response_time(latencies_ms: Sequence[float]) -> float:
    """Arithmetic mean of per-query latencies in milliseconds (left-to-right sum)."""
    if len(latencies_ms) == 0:
        raise ValueError("no latencies to average")
    total = 0.0
    for v in latencies_ms:
        total += float(v)
    return total / len(latencies_ms)


def latency_summary(latencies_ms: Sequence[float]) -> LatencySummary:
    mean = mean_response_time(latencies_ms)
    p50, p95, p99 = np.percentile(np.asarray(latencies_ms, dtype=np.float64), [50, 95, 99])
    return LatencySummary(len(latencies_ms), mean, float(p50), float(p95), float(p99))
