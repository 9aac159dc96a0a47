import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constbert.index import build_index, open_index
from constbert.retrieval import (
    CandidateList,
    OverlapRetriever,
    ScanStats,
    UnknownCandidateError,
    first_stage_overlap,
    rerank,
    search_exact,
    top_k,
)
from constbert.scoring import ShapeError, maxsim


def make_index(tmp_path, n, c=4, k=8, seed=0, name="idx"):
    rng = np.random.default_rng(seed)
    mats = rng.normal(size=(n, c, k)).astype(np.float32)
    p = tmp_path / name
    build_index(p, [(f"d{i}", m) for i, m in enumerate(mats)], c_vectors=c, dim=k, alignment=64)
    return open_index(p), mats


def oracle_ranking(query, mats, k):
    scored = [(maxsim(query, m), i) for i, m in enumerate(mats)]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return scored[:k]


def test_single_doc(tmp_path, backend):
    idx, mats = make_index(tmp_path, 1)
    q = np.ones((2, 8), np.float32)
    res = search_exact(idx, q, 10)
    assert len(res) == 1 and res[0].external_id == "d0"
    assert res[0].score == pytest.approx(maxsim(q, mats[0]), abs=1e-9)


def test_topk_larger_than_corpus(tmp_path, backend):
    idx, _ = make_index(tmp_path, 5)
    assert len(search_exact(idx, np.ones((1, 8)), 100)) == 5


def test_search_matches_full_sort(tmp_path, backend):
    idx, mats = make_index(tmp_path, 500, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(5):
        q = rng.normal(size=(6, 8)).astype(np.float32)
        got = [(r.score, r.doc_id) for r in search_exact(idx, q, 10)]
        want = oracle_ranking(q, mats, 10)
        assert [d for _, d in got] == [d for _, d in want]
        np.testing.assert_allclose([s for s, _ in got], [s for s, _ in want], atol=1e-6)


def test_ties_break_by_doc_id(tmp_path, backend):
    p = tmp_path / "idx"
    same = np.ones((2, 2), np.float32)
    build_index(p, [(f"d{i}", same) for i in range(6)], c_vectors=2, dim=2, alignment=64)
    with open_index(p) as idx:
        assert [r.doc_id for r in search_exact(idx, [[1, 0]], 4)] == [0, 1, 2, 3]


def test_top_k_keeps_ties_exact():
    scores = np.array([1.0, 3.0, 3.0, 2.0, 3.0])
    ids = np.array([10, 4, 2, 1, 3])
    assert list(ids[top_k(scores, ids, 2)]) == [2, 3]
    assert top_k(np.zeros(0), np.zeros(0, np.int64), 3).size == 0


def test_rerank_over_everything_equals_search(tmp_path, backend):
    idx, _ = make_index(tmp_path, 200, seed=5)
    q = np.random.default_rng(6).normal(size=(4, 8)).astype(np.float32)
    full = rerank(idx, q, CandidateList("q", list(reversed(idx.ids))), 10)
    assert full == search_exact(idx, q, 10)


def test_rerank_single_candidate(tmp_path, backend):
    idx, mats = make_index(tmp_path, 20)
    q = np.ones((3, 8), np.float32)
    res = rerank(idx, q, ["d7"], 10)
    assert [r.external_id for r in res] == ["d7"]
    assert res[0].score == pytest.approx(maxsim(q, mats[7]), abs=1e-9)


def test_rerank_results_subset_of_candidates(tmp_path, backend):
    idx, _ = make_index(tmp_path, 100)
    cands = [f"d{i}" for i in range(0, 100, 7)]
    res = rerank(idx, np.ones((2, 8)), cands, 5)
    assert len(res) == 5 and {r.external_id for r in res} <= set(cands)


def test_rerank_duplicate_candidates_scored_once(tmp_path, backend):
    idx, _ = make_index(tmp_path, 10)
    stats = ScanStats()
    res = rerank(idx, np.ones((2, 8)), ["d1", "d1", "d2"], 10, stats=stats)
    assert len(res) == 2 and stats.scored == 2


def test_rerank_unknown_candidate(tmp_path):
    idx, _ = make_index(tmp_path, 10)
    with pytest.raises(UnknownCandidateError, match="nope"):
        rerank(idx, np.ones((2, 8)), ["d1", "nope"], 10)
    res = rerank(idx, np.ones((2, 8)), ["d1", "nope"], 10, lenient=True)
    assert [r.external_id for r in res] == ["d1"]
    assert rerank(idx, np.ones((2, 8)), ["nope"], 10, lenient=True) == []


def test_query_dim_mismatch(tmp_path):
    idx, _ = make_index(tmp_path, 3)
    with pytest.raises(ShapeError):
        search_exact(idx, np.ones((2, 5)), 3)
    with pytest.raises(ValueError):
        search_exact(idx, np.ones((2, 8)), 0)


def test_exact_search_scores_every_document(tmp_path, backend):
    idx, _ = make_index(tmp_path, 321)
    stats = ScanStats()
    search_exact(idx, np.ones((2, 8)), 10, stats=stats)
    assert stats.scored == stats.decoded == 321


def test_parallel_matches_serial(tmp_path, backend):
    idx, _ = make_index(tmp_path, 300, seed=8)
    q = np.random.default_rng(1).normal(size=(5, 8)).astype(np.float32)
    assert search_exact(idx, q, 20, parallel=True) == search_exact(idx, q, 20)


def test_adding_a_better_doc_never_lowers_it(tmp_path, backend):
    idx, mats = make_index(tmp_path, 50, seed=2)
    q = np.random.default_rng(3).normal(size=(3, 8)).astype(np.float32)
    before = [r.external_id for r in search_exact(idx, q, 5)]
    # a doc containing q's own rows cannot score below any other doc with unit-scale rows
    better = np.vstack([q, np.zeros((1, 8), np.float32)]) * 10
    p = tmp_path / "bigger"
    build_index(p, [(f"d{i}", m) for i, m in enumerate(mats)] + [("new", better)], c_vectors=4, dim=8, alignment=64)
    with open_index(p) as big:
        after = [r.external_id for r in search_exact(big, q, 5)]
    assert after[0] == "new" and after[1:] == before[:4]


# ---------------------------------------------------------------- first stage


def test_unique_shared_token_ranks_first():
    corpus = [[1, 2, 3], [4, 5, 6], [7, 8, 9, 1]]
    cands = first_stage_overlap(corpus, [5], 3)
    assert cands.doc_ids == ["1"]


def test_no_corpus_tokens_gives_empty_flagged_list():
    cands = first_stage_overlap([[1, 2], [3]], [99, 100], 5, query_id="qx")
    assert cands.doc_ids == [] and cands.no_match and cands.query_id == "qx"


def test_empty_query_rejected():
    with pytest.raises(ValueError):
        first_stage_overlap([[1]], [], 5)


def test_overlap_scores_match_formula():
    rng = np.random.default_rng(7)
    corpus = [list(rng.integers(0, 30, size=int(rng.integers(3, 12)))) for _ in range(20)]
    ret = OverlapRetriever(corpus)
    query = [1, 4, 4, 9, 17, 29]
    n = len(corpus)
    for d, toks in enumerate(corpus):
        want = 0.0
        for t in sorted(set(query)):
            if t in toks:
                df = sum(t in doc for doc in corpus)
                want += math.log(1 + (n - df + 0.5) / (df + 0.5))
        assert ret.scores(query)[d] == pytest.approx(want, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 15), min_size=1, max_size=8), min_size=1, max_size=15), st.lists(st.integers(0, 15), min_size=1, max_size=5), st.integers(1, 20))
def test_first_stage_ordering_property(corpus, query, k):
    ret = OverlapRetriever(corpus)
    scores = ret.scores(query)
    cands = ret.candidates("q", query, k)
    ids = [int(d) for d in cands.doc_ids]
    assert len(ids) == min(k, int((scores > 0).sum()))
    assert all(scores[i] > 0 for i in ids)
    keyed = [(-scores[i], i) for i in ids]
    assert keyed == sorted(keyed)
