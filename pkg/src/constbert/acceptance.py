"""End-to-end acceptance checks, shared by the test suite and ``constbert repro``.

Each ``check_*`` function runs one criterion and returns a ``CheckResult``.
Reference values come from deliberately naive code paths (nested Python
loops, full sorts, direct formula evaluation) that share nothing with the
kernels under test.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels, evaluation, index as ix, pooling, retrieval, scoring, synth


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number}. {self.name}: {self.detail} ({self.seconds:.1f}s)"


# --------------------------------------------------------------------------
# reference implementations
# --------------------------------------------------------------------------


def naive_maxsim(q: np.ndarray, d: np.ndarray) -> float:
    total = 0.0
    for i in range(q.shape[0]):
        best = -math.inf
        for j in range(d.shape[0]):
            s = 0.0
            for c in range(q.shape[1]):
                s += float(q[i, c]) * float(d[j, c])
            best = max(best, s)
        total += best
    return total


def naive_argmax(q: np.ndarray, d: np.ndarray) -> list[int]:
    out = []
    for i in range(q.shape[0]):
        best, arg = -math.inf, -1
        for j in range(d.shape[0]):
            s = sum(float(q[i, c]) * float(d[j, c]) for c in range(q.shape[1]))
            if s > best:
                best, arg = s, j
        out.append(arg)
    return out


def naive_pool(doc: np.ndarray, W: np.ndarray, c_vectors: int) -> np.ndarray:
    """``W.T @ flatten(doc)`` reshaped to (C, k), in float64."""
    x = np.asarray(doc, dtype=np.float64).reshape(-1)
    W = np.asarray(W, dtype=np.float64)
    y = np.zeros(W.shape[1])
    for col in range(W.shape[1]):
        y[col] = math.fsum(x[r] * W[r, col] for r in range(W.shape[0]) if x[r] != 0.0)
    return y.reshape(c_vectors, -1)


def fd_gradient(q: np.ndarray, doc: np.ndarray, W: np.ndarray, c_vectors: int, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of the pooled MaxSim score w.r.t. every W entry."""
    q = np.asarray(q, dtype=np.float64)
    x = np.asarray(doc, dtype=np.float64).reshape(-1)
    W = np.asarray(W, dtype=np.float64)

    def score(Wp):
        P = (x @ Wp).reshape(c_vectors, -1)
        return float(np.sum(np.max(q @ P.T, axis=1)))

    g = np.zeros_like(W)
    for r in range(W.shape[0]):
        for col in range(W.shape[1]):
            up, dn = W.copy(), W.copy()
            up[r, col] += h
            dn[r, col] -= h
            g[r, col] = (score(up) - score(dn)) / (2 * h)
    return g


def argmax_margin(q: np.ndarray, P: np.ndarray) -> float:
    sims = np.asarray(q, np.float64) @ np.asarray(P, np.float64).T
    if sims.shape[1] < 2:
        return math.inf
    top2 = np.sort(sims, axis=1)[:, -2:]
    return float(np.min(top2[:, 1] - top2[:, 0]))


def full_sort_topk(scores, k: int) -> list[tuple[int, float]]:
    pairs = sorted(((float(s), i) for i, s in enumerate(scores)), key=lambda p: (-p[0], p[1]))
    return [(i, s) for s, i in pairs[:k]]


def reference_metrics(run: dict, qrels: dict, k_mrr=10, k_ndcg=10, k_recall=50) -> dict:
    """Straight-line re-derivation of MRR/nDCG/recall (gain 2^g - 1, log2(r+1) discount)."""
    mrr, ndcg, rec = [], [], []
    for qid in sorted(set(run) & set(qrels)):
        ranked = [d for d, _ in run[qid]]
        grades = qrels[qid]
        rr = 0.0
        for pos in range(min(k_mrr, len(ranked))):
            if grades.get(ranked[pos], 0) > 0:
                rr = 1.0 / (pos + 1)
                break
        mrr.append(rr)
        gains = [2 ** grades.get(d, 0) - 1 for d in ranked[:k_ndcg]]
        dcg = sum(g / math.log2(i + 2) for i, g in enumerate(gains))
        ideal = sorted([2**g - 1 for g in grades.values()], reverse=True)[:k_ndcg]
        idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
        ndcg.append(dcg / idcg if idcg else 0.0)
        rel = [d for d, g in grades.items() if g > 0]
        top = set(ranked[:k_recall])
        rec.append(sum(1 for d in rel if d in top) / len(rel) if rel else 0.0)
    return {"mrr": sum(mrr) / len(mrr), "ndcg": sum(ndcg) / len(ndcg), "recall": sum(rec) / len(rec)}


# --------------------------------------------------------------------------
# fixtures
# --------------------------------------------------------------------------


def random_instance(rng: np.random.Generator, max_n=8, max_m=8, max_k=16):
    n = int(rng.integers(1, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    k = int(rng.integers(1, max_k + 1))
    q = rng.uniform(-1, 1, size=(n, k)).astype(np.float32)
    d = rng.uniform(-1, 1, size=(m, k)).astype(np.float32)
    return q, d


def tie_free_grad_instance(seed: int, max_m=6, max_c=3, max_k=4, margin=1e-3):
    """Random (query, doc, weights) whose pooled argmaxes all win by at least ``margin``."""
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, attempt])
        attempt += 1
        m = int(rng.integers(2, max_m + 1))
        c = int(rng.integers(1, min(max_c, m) + 1))
        k = int(rng.integers(1, max_k + 1))
        n = int(rng.integers(1, 5))
        q = rng.uniform(-1, 1, size=(n, k)).astype(np.float32)
        d = rng.uniform(-1, 1, size=(m, k)).astype(np.float32)
        w = pooling.init_weights(m, c, k, seed=int(rng.integers(0, 2**31)))
        P = naive_pool(d, w.data, c)
        if argmax_margin(q, P) >= margin:
            return q, d, w


def metrics_fixture(seed: int = 0, n_queries: int = 50, n_docs: int = 200, depth: int = 100):
    rng = np.random.default_rng(seed)
    qrels, run = {}, {}
    for qi in range(n_queries):
        qid = f"q{qi}"
        judged = rng.choice(n_docs, size=int(rng.integers(5, 40)), replace=False)
        qrels[qid] = {f"d{int(d)}": int(rng.integers(0, 4)) for d in judged}
        ranked = rng.choice(n_docs, size=depth, replace=False)
        scores = np.sort(rng.normal(size=depth))[::-1]
        run[qid] = [(f"d{int(d)}", float(s)) for d, s in zip(ranked, scores)]
    return run, qrels


# --------------------------------------------------------------------------
# criteria
# --------------------------------------------------------------------------


def _timed(number: int, name: str, fn: Callable[[], tuple[bool, str, dict]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail, values = fn()
    return CheckResult(number, name, bool(ok), detail, time.perf_counter() - t0, values)


def check_scoring_oracle(n_instances: int = 1000, seed: int = 2024) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_instances):
            q, d = random_instance(rng)
            worst = max(worst, abs(scoring.maxsim(q, d) - naive_maxsim(q, d)))
        return worst < 1e-6, f"max |delta| = {worst:.3g} over {n_instances} instances (< 1e-6)", {"max_delta": worst}

    res = _timed(1, "scoring oracle equivalence", run)
    if res.seconds >= 5.0:
        res.passed = False
        res.detail += f"; runtime {res.seconds:.2f}s exceeds 5s"
    return res


def check_identity_pooling(n_instances: int = 200, seed: int = 7) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_instances):
            m = int(rng.integers(1, 9))
            k = int(rng.integers(1, 17))
            n = int(rng.integers(1, 9))
            q = rng.uniform(-1, 1, size=(n, k)).astype(np.float32)
            d = rng.uniform(-1, 1, size=(m, k)).astype(np.float32)
            w = pooling.ProjectionWeights.identity(m, k)
            worst = max(worst, abs(pooling.score_pooled(q, d, w) - scoring.maxsim(q, d)))
        return worst < 1e-6, f"max |delta| = {worst:.3g} over {n_instances} instances (< 1e-6)", {"max_delta": worst}

    return _timed(2, "identity-pooling equivalence", run)


def check_gradient(n_instances: int = 50, seed: int = 11, h: float = 1e-3) -> CheckResult:
    def run():
        worst = 0.0
        for s in range(n_instances):
            q, d, w = tie_free_grad_instance(seed * 1000 + s)
            analytic = pooling.grad_score_wrt_w(q, d, w)
            numeric = fd_gradient(q, d, w.data, w.c_vectors, h)
            scale = max(float(np.max(np.abs(numeric))), 1e-12)
            worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
        return worst < 1e-4, f"max relative error = {worst:.3g} over {n_instances} instances (< 1e-4)", {"max_rel_err": worst}

    return _timed(3, "gradient correctness", run)


def check_constant_space(num_docs: int = 200, m_tokens: int = 64, c_vectors: int = 32, dim: int = 16, seed: int = 3) -> CheckResult:
    def run():
        cfg = synth.SynthConfig(
            vocab_size=200, num_topics=4, docs_per_topic=num_docs // 4, doc_len_range=(8, 80),
            m_tokens=m_tokens, dim=dim, queries_per_topic=0, train_queries_per_topic=0, seed=seed,
        )
        corpus = synth.gen_corpus(cfg)
        docs = synth.encode_docs_padded(corpus)
        w = pooling.init_weights(m_tokens, c_vectors, dim, seed)
        pooled = pooling.pool_many(docs, w)
        token_payload = docs.shape[0] * m_tokens * dim * 4
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "pooled.cbix"
            hdr = ix.build_index(path, zip(corpus.doc_ids, pooled), c_vectors=c_vectors, dim=dim, dtype="f32", alignment=4096)
            size = path.stat().st_size
            with ix.open_index(path) as idx:
                offsets_ok = all(idx.offset(i) % 4096 == 0 for i in range(idx.num_docs))
        pooled_payload = hdr.num_docs * c_vectors * dim * 4
        ratio = token_payload / pooled_payload
        size_ok = size == ix.HEADER_SIZE + hdr.num_docs * hdr.record_size
        ok = ratio == m_tokens / c_vectors == 2.0 and offsets_ok and size_ok
        detail = (f"token/pooled payload ratio = {ratio:.3f} (M/C = {m_tokens / c_vectors:.3f}); "
                  f"file = 4096 + {hdr.num_docs} x {hdr.record_size} bytes: {size_ok}; offsets 4096-aligned: {offsets_ok}")
        return ok, detail, {"ratio": ratio, "file_size": size}

    return _timed(4, "constant space and factor M/C", run)


def acceptance_synth_config() -> synth.SynthConfig:
    return synth.SynthConfig(
        vocab_size=400, num_topics=20, docs_per_topic=500, doc_len_range=(16, 32), m_tokens=32, dim=16,
        queries_per_topic=10, query_len=8, noise_fraction=0.2, seed=3, train_queries_per_topic=100,
        negatives_per_triplet=1,
    )


@lru_cache(maxsize=4)
def trained_weights(c_vectors: int) -> pooling.ProjectionWeights:
    """Weights trained with the default TrainConfig on the acceptance corpus (memoised)."""
    cfg = acceptance_synth_config()
    corpus = synth.gen_corpus(cfg)
    triplets = synth.training_triplets(corpus)
    tc = pooling.TrainConfig(seed=cfg.seed)
    return pooling.train_pool(triplets, tc, m_tokens=cfg.m_tokens, c_vectors=c_vectors).weights


def _mrr_from_scores(score_fn, queries, corpus, k=10) -> float:
    run = {}
    ids = corpus.doc_ids
    for qi, q in enumerate(queries):
        scores = score_fn(q)
        sel = retrieval.top_k(scores, np.arange(scores.shape[0]), k)
        run[f"q{qi}"] = [(ids[i], float(scores[i])) for i in sel]
    return evaluation.mrr_at_k(run, corpus.qrels, 10)


def check_effectiveness(c_values=(4, 8, 16), train_config: pooling.TrainConfig | None = None) -> CheckResult:
    def run():
        cfg = acceptance_synth_config()
        corpus = synth.gen_corpus(cfg)
        queries = synth.encode_queries(corpus)
        tokens, offsets = synth.encode_docs_ragged(corpus)
        token_mrr = _mrr_from_scores(lambda q: _kernels.backend.scan_ragged(q, tokens, offsets), queries, corpus)
        docs = synth.encode_docs_padded(corpus)
        triplets = synth.training_triplets(corpus) if train_config is not None else None
        tc = train_config or pooling.TrainConfig(seed=cfg.seed)
        mrr = {}
        for c in c_values:
            w = trained_weights(c) if train_config is None else pooling.train_pool(
                triplets, tc, m_tokens=cfg.m_tokens, c_vectors=c).weights
            pooled = pooling.pool_many(docs, w, normalize=tc.normalize_pooled)
            mrr[c] = _mrr_from_scores(lambda q: _kernels.backend.scan_fixed(q, pooled), queries, corpus)
        lo, mid, hi = (mrr[c] for c in c_values)
        ok_floor = token_mrr >= 0.95
        ok_trend = lo <= mid + 0.02 <= hi + 0.04
        ok_retain = hi >= 0.90 * token_mrr
        detail = (f"token MRR@10 = {token_mrr:.4f} (>= 0.95: {ok_floor}); "
                  + ", ".join(f"C={c}: {mrr[c]:.4f}" for c in c_values)
                  + f"; trend with slack: {ok_trend}; C={c_values[-1]} retains {hi / token_mrr:.1%} (>= 90%: {ok_retain})")
        return ok_floor and ok_trend and ok_retain, detail, {"token_mrr": token_mrr, **{f"mrr_c{c}": v for c, v in mrr.items()}}

    res = _timed(5, "desk-scale effectiveness retention", run)
    if res.seconds >= 180.0:
        res.passed = False
        res.detail += f"; runtime {res.seconds:.1f}s exceeds 180s"
    return res


def check_rerank_consistency(first_stage_depth: int = 200, topk: int = 10, c_vectors: int = 16) -> CheckResult:
    """Rerank vs exhaustive search on the acceptance corpus.

    Queries whose first-stage list already holds the exact top-k are checked
    as-is.  Every query is also checked with the exact top-k appended to its
    first-stage list, since with hundreds of equally relevant documents per
    topic natural containment is rare.
    """

    def run():
        cfg = acceptance_synth_config()
        corpus = synth.gen_corpus(cfg)
        queries = synth.encode_queries(corpus)
        docs = synth.encode_docs_padded(corpus)
        pooled = pooling.pool_many(docs, trained_weights(c_vectors))
        first = retrieval.OverlapRetriever(corpus.docs, corpus.doc_ids)
        contained = agree_natural = agree_aug = 0
        exact_run, rerank_run = {}, {}
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "idx.cbix"
            ix.build_index(path, zip(corpus.doc_ids, pooled), c_vectors=c_vectors, dim=cfg.dim)
            with ix.open_index(path) as idx:
                for qi, q in enumerate(queries):
                    qid = f"q{qi}"
                    exact = retrieval.search_exact(idx, q, topk)
                    key = [(r.doc_id, r.score) for r in exact]
                    cands = first.candidates(qid, corpus.queries[qi], first_stage_depth)
                    rr = retrieval.rerank(idx, q, cands, topk)
                    exact_run[qid] = [(r.external_id, r.score) for r in exact]
                    rerank_run[qid] = [(r.external_id, r.score) for r in rr]
                    if {r.external_id for r in exact} <= set(cands.doc_ids):
                        contained += 1
                        agree_natural += [(r.doc_id, r.score) for r in rr] == key
                    augmented = cands.doc_ids + [r.external_id for r in exact]
                    rr_aug = retrieval.rerank(idx, q, augmented, topk)
                    agree_aug += [(r.doc_id, r.score) for r in rr_aug] == key
        n = len(queries)
        rate = contained / n
        mrr_exact = evaluation.mrr_at_k(exact_run, corpus.qrels, 10)
        mrr_rerank = evaluation.mrr_at_k(rerank_run, corpus.qrels, 10)
        ok = agree_natural == contained and agree_aug == n
        detail = (f"natural containment {contained}/{n} = {rate:.1%} (agree {agree_natural}/{contained}); "
                  f"augmented candidates agree {agree_aug}/{n}; "
                  f"MRR@10 exact {mrr_exact:.4f} vs two-stage {mrr_rerank:.4f}")
        return ok, detail, {"containment_rate": rate, "agree_augmented": agree_aug,
                            "mrr_exact": mrr_exact, "mrr_two_stage": mrr_rerank}

    return _timed(6, "rerank consistency", run)


def check_metrics() -> CheckResult:
    def run():
        qrels = {"a": {"x": 1}, "b": {"y": 1}, "c": {"z": 1}}
        run_ = {
            "a": [("x", 3.0), ("p", 2.0)],
            "b": [("p", 4.0), ("q", 3.0), ("r", 2.0), ("y", 1.0)],
            "c": [("p", 1.0)],
        }
        mrr = evaluation.mrr_at_k(run_, qrels, 10)
        ndcg = evaluation.ndcg_at_k({"q": [("g3", 3.0), ("g0", 2.0), ("g1", 1.0)]},
                                    {"q": {"g3": 3, "g0": 0, "g1": 1}}, 10)
        rec = evaluation.recall_at_k({"q": [("r1", 2.0), ("x", 1.5), ("r2", 1.0)]},
                                     {"q": {"r1": 1, "r2": 1, "r3": 1, "r4": 1}}, 50)
        frun, fq = metrics_fixture()
        ref = reference_metrics(frun, fq)
        got = {"mrr": evaluation.mrr_at_k(frun, fq, 10), "ndcg": evaluation.ndcg_at_k(frun, fq, 10),
               "recall": evaluation.recall_at_k(frun, fq, 50)}
        worst = max(abs(got[m] - ref[m]) for m in ref)
        parts = {
            "MRR@10 = 0.416667": round(mrr, 6) == 0.416667,
            "nDCG@10 = 0.982841 +/- 1e-6": abs(ndcg - 0.982841) <= 1e-6,
            "Recall@50 = 0.5": rec == 0.5,
            "fixture within 1e-6": worst <= 1e-6,
        }
        failed = [k for k, v in parts.items() if not v]
        detail = (f"MRR@10 = {mrr:.6f}, nDCG@10 = {ndcg:.8f}, Recall@50 = {rec}; "
                  f"50-query fixture max |delta| vs reference = {worst:.3g}"
                  + (f"; failed: {', '.join(failed)}" if failed else ""))
        return not failed, detail, {"mrr": mrr, "ndcg": ndcg, "recall": rec, "fixture_delta": worst}

    return _timed(7, "metrics oracle", run)


def check_persistence(num_docs: int = 100, c_vectors: int = 4, dim: int = 8, seed: int = 5) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        mats = rng.normal(size=(num_docs, c_vectors, dim)).astype(np.float32)
        ids = [f"doc-{i}" for i in range(num_docs)]
        with tempfile.TemporaryDirectory() as tmp:
            t = Path(tmp)
            ix.build_index(t / "a.cbix", zip(ids, mats), c_vectors=c_vectors, dim=dim)
            ix.build_index(t / "b.cbix", zip(ids, mats), c_vectors=c_vectors, dim=dim)
            same_bytes = (t / "a.cbix").read_bytes() == (t / "b.cbix").read_bytes()
            with ix.open_index(t / "a.cbix") as idx:
                exact = all(np.array_equal(idx.get_doc(i).view(np.uint32), mats[i].view(np.uint32)) for i in range(num_docs))
            w = pooling.init_weights(6, 3, 4, seed)
            pooling.save_weights(t / "w.cbpw", w)
            w2 = pooling.load_weights(t / "w.cbpw")
            w_exact = np.array_equal(w.data.view(np.uint32), w2.data.view(np.uint32)) and (w2.m_tokens, w2.c_vectors, w2.dim) == (6, 3, 4)
        ok = same_bytes and exact and w_exact
        return ok, f"f32 get_doc bit-exact: {exact}; weights bit-exact: {w_exact}; rebuild byte-identical: {same_bytes}", {}

    return _timed(8, "persistence round-trips", run)


def check_i8_bound(num_docs: int = 100, c_vectors: int = 8, dim: int = 16, seed: int = 9) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        mats = rng.uniform(-1, 1, size=(num_docs, c_vectors, dim)).astype(np.float32)
        ids = [f"d{i}" for i in range(num_docs)]
        worst_ratio = 0.0
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "q.cbix"
            ix.build_index(path, zip(ids, mats), c_vectors=c_vectors, dim=dim, dtype="i8", alignment=64)
            with ix.open_index(path) as idx:
                for i in range(num_docs):
                    bound = float(np.max(np.abs(mats[i]))) / 127.0
                    err = float(np.max(np.abs(idx.get_doc(i).astype(np.float64) - mats[i])))
                    worst_ratio = max(worst_ratio, err / bound)
        return worst_ratio <= 1.0, f"max error / (max|v|/127) = {worst_ratio:.3f} over {num_docs} records (<= 1)", {"worst_ratio": worst_ratio}

    return _timed(9, "i8 quantization bound", run)


ALL_CHECKS = (
    check_scoring_oracle,
    check_identity_pooling,
    check_gradient,
    check_constant_space,
    check_effectiveness,
    check_rerank_consistency,
    check_metrics,
    check_persistence,
    check_i8_bound,
)


def run_all(echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = []
    for check in ALL_CHECKS:
        res = check()
        if echo is not None:
            echo(res.line())
        results.append(res)
    return results
