"""Deterministic synthetic retrieval tasks with toy token embeddings.

Token vectors come from a counter-based generator: token ``t`` under seed
``s`` is ``standard_normal(dim)`` drawn from ``numpy.random.Philox`` keyed
with ``[t, s]`` (two 64-bit words, counter starting at zero), then
L2-normalised.  A token's vector therefore depends only on ``(t, s, dim)``,
never on which other tokens were encoded or in what order.

Each topic owns a disjoint pool of vocabulary ids.  Documents mix pool
tokens with uniform noise; queries draw from a single pool; every document
of the query's topic is relevant with grade 1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .evaluation import load_qrels, write_qrels
from .index import file_digest, write_embeddings


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 400
    num_topics: int = 20
    docs_per_topic: int = 500
    doc_len_range: tuple[int, int] = (16, 32)
    m_tokens: int = 32
    dim: int = 16
    queries_per_topic: int = 10
    query_len: int = 8
    noise_fraction: float = 0.2
    seed: int = 3
    train_queries_per_topic: int = 100
    negatives_per_triplet: int = 1

    def __post_init__(self):
        object.__setattr__(self, "doc_len_range", tuple(int(v) for v in self.doc_len_range))
        lo, hi = self.doc_len_range
        checks = [
            (self.num_topics >= 1, "num_topics must be >= 1"),
            (self.docs_per_topic >= 1, "docs_per_topic must be >= 1"),
            (1 <= lo <= hi, f"doc_len_range must satisfy 1 <= min <= max, got {self.doc_len_range}"),
            (self.m_tokens >= 1, "m_tokens must be >= 1"),
            (self.dim >= 2, "dim must be >= 2"),
            (self.queries_per_topic >= 0, "queries_per_topic must be >= 0"),
            (self.train_queries_per_topic >= 0, "train_queries_per_topic must be >= 0"),
            (self.query_len >= 1, "query_len must be >= 1"),
            (0.0 <= self.noise_fraction < 1.0, f"noise_fraction must be in [0, 1), got {self.noise_fraction}"),
            (self.vocab_size >= self.num_topics * 10,
             f"vocab_size must be >= num_topics * 10 = {self.num_topics * 10}, got {self.vocab_size}"),
            (self.negatives_per_triplet >= 0, "negatives_per_triplet must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        if self.negatives_per_triplet > 0 and self.num_topics < 2 and self.train_queries_per_topic > 0:
            raise ValueError("negatives from other topics need num_topics >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["doc_len_range"] = list(self.doc_len_range)
        return d


@dataclass
class SynthCorpus:
    config: SynthConfig
    pools: list[np.ndarray]
    docs: list[list[int]]
    doc_topics: list[int]
    queries: list[list[int]]
    query_topics: list[int]
    qrels: dict[str, dict[str, int]]
    train_queries: list[list[int]]
    train_query_topics: list[int]
    # (train query index, positive doc index, negative doc indices)
    triplets: list[tuple[int, int, list[int]]] = field(default_factory=list)

    @property
    def doc_ids(self) -> list[str]:
        return [f"d{i}" for i in range(len(self.docs))]

    @property
    def query_ids(self) -> list[str]:
        return [f"q{i}" for i in range(len(self.queries))]


def _philox_row(token_id: int, dim: int, seed: int) -> np.ndarray:
    key = np.array([token_id, seed], dtype=np.uint64)
    v = np.random.Generator(np.random.Philox(key=key)).standard_normal(dim)
    return v / np.linalg.norm(v)


@lru_cache(maxsize=8)
def _table(vocab_size: int, dim: int, seed: int) -> np.ndarray:
    tab = np.empty((vocab_size, dim), dtype=np.float32)
    for t in range(vocab_size):
        tab[t] = _philox_row(t, dim, seed)
    tab.flags.writeable = False
    return tab


def toy_encode(token_ids, dim: int, seed: int, vocab_size: int | None = None) -> np.ndarray:
    """Map token ids to fixed unit vectors; returns ``(len(token_ids), dim)`` float32.

    Passing ``vocab_size`` reuses a cached lookup table for that vocabulary.
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if vocab_size is not None and (ids.size == 0 or ids.max() < vocab_size) and ids.min(initial=0) >= 0:
        return _table(vocab_size, dim, seed)[ids].copy()
    out = np.empty((ids.size, dim), dtype=np.float32)
    for r, t in enumerate(ids):
        out[r] = _philox_row(int(t), dim, seed)
    return out


def gen_corpus(config: SynthConfig) -> SynthCorpus:
    cfg = config
    root = np.random.SeedSequence(cfg.seed)
    s_pools, s_docs, s_queries, s_train, s_trip = (np.random.default_rng(s) for s in root.spawn(5))

    pool_size = cfg.vocab_size // cfg.num_topics
    if pool_size < 1:
        raise ValueError("infeasible config: topic pools would be empty")
    perm = s_pools.permutation(cfg.vocab_size)
    pools = [np.sort(perm[t * pool_size : (t + 1) * pool_size]) for t in range(cfg.num_topics)]

    lo, hi = cfg.doc_len_range
    docs, doc_topics = [], []
    for t in range(cfg.num_topics):
        for _ in range(cfg.docs_per_topic):
            n = int(s_docs.integers(lo, hi + 1))
            n_noise = int(round(cfg.noise_fraction * n))
            toks = np.concatenate(
                [
                    s_docs.choice(pools[t], size=n - n_noise, replace=True),
                    s_docs.integers(0, cfg.vocab_size, size=n_noise),
                ]
            )
            s_docs.shuffle(toks)
            docs.append([int(x) for x in toks])
            doc_topics.append(t)

    def _queries(rng, per_topic):
        out, topics = [], []
        for t in range(cfg.num_topics):
            for _ in range(per_topic):
                replace = cfg.query_len > pool_size
                toks = rng.choice(pools[t], size=cfg.query_len, replace=replace)
                out.append([int(x) for x in toks])
                topics.append(t)
        return out, topics

    queries, query_topics = _queries(s_queries, cfg.queries_per_topic)
    train_queries, train_topics = _queries(s_train, cfg.train_queries_per_topic)

    qrels: dict[str, dict[str, int]] = {}
    by_topic = [np.flatnonzero(np.asarray(doc_topics) == t) for t in range(cfg.num_topics)]
    for qi, t in enumerate(query_topics):
        qrels[f"q{qi}"] = {f"d{int(di)}": 1 for di in by_topic[t]}

    triplets = []
    n_docs = len(docs)
    for qi, t in enumerate(train_topics):
        pos = int(s_trip.choice(by_topic[t]))
        negs = []
        while len(negs) < cfg.negatives_per_triplet:
            cand = int(s_trip.integers(0, n_docs))
            if doc_topics[cand] != t:
                negs.append(cand)
        triplets.append((qi, pos, negs))

    return SynthCorpus(
        config=cfg,
        pools=pools,
        docs=docs,
        doc_topics=doc_topics,
        queries=queries,
        query_topics=query_topics,
        qrels=qrels,
        train_queries=train_queries,
        train_query_topics=train_topics,
        triplets=triplets,
    )


def encode_docs_padded(corpus: SynthCorpus, m_tokens: int | None = None, dim: int | None = None) -> np.ndarray:
    """All documents as a ``(num_docs, M, k)`` float32 array, zero-padded/truncated to M."""
    cfg = corpus.config
    m = m_tokens or cfg.m_tokens
    k = dim or cfg.dim
    tab = _table(cfg.vocab_size, k, cfg.seed)
    out = np.zeros((len(corpus.docs), m, k), dtype=np.float32)
    for i, toks in enumerate(corpus.docs):
        toks = toks[:m]
        out[i, : len(toks)] = tab[toks]
    return out


def encode_docs_ragged(corpus: SynthCorpus, dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unpadded token matrices concatenated, plus CSR-style row offsets."""
    cfg = corpus.config
    k = dim or cfg.dim
    tab = _table(cfg.vocab_size, k, cfg.seed)
    lengths = np.array([len(t) for t in corpus.docs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    flat = np.fromiter((x for toks in corpus.docs for x in toks), dtype=np.int64, count=int(offsets[-1]))
    return tab[flat].copy(), offsets


def encode_queries(corpus: SynthCorpus, which: str = "eval", dim: int | None = None) -> list[np.ndarray]:
    cfg = corpus.config
    k = dim or cfg.dim
    qs = corpus.queries if which == "eval" else corpus.train_queries
    return [toy_encode(q, k, cfg.seed, vocab_size=cfg.vocab_size) for q in qs]


def training_triplets(corpus: SynthCorpus, m_tokens: int | None = None, dim: int | None = None):
    """Embedded (query, positive, negatives) triplets ready for ``train_pool``."""
    docs = encode_docs_padded(corpus, m_tokens, dim)
    tq = encode_queries(corpus, "train", dim)
    return [(tq[qi], docs[p], [docs[n] for n in negs]) for qi, p, negs in corpus.triplets]


# --------------------------------------------------------------------------
# on-disk corpus directory
# --------------------------------------------------------------------------

CORPUS_FILES = (
    "docs.jsonl",
    "queries.jsonl",
    "train_queries.jsonl",
    "triplets.jsonl",
    "qrels.txt",
    "docs.cbem",
    "docs.cbem.ids.tsv",
    "queries.cbem",
    "queries.cbem.ids.tsv",
)


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def _read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_corpus(corpus: SynthCorpus, out_dir) -> dict:
    """Write token JSONL, qrels, CBEM embeddings and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(
        out / "docs.jsonl",
        ({"id": f"d{i}", "topic": t, "tokens": toks} for i, (toks, t) in enumerate(zip(corpus.docs, corpus.doc_topics))),
    )
    _write_jsonl(
        out / "queries.jsonl",
        ({"id": f"q{i}", "topic": t, "tokens": toks} for i, (toks, t) in enumerate(zip(corpus.queries, corpus.query_topics))),
    )
    _write_jsonl(
        out / "train_queries.jsonl",
        (
            {"id": f"t{i}", "topic": t, "tokens": toks}
            for i, (toks, t) in enumerate(zip(corpus.train_queries, corpus.train_query_topics))
        ),
    )
    _write_jsonl(
        out / "triplets.jsonl",
        ({"query": f"t{q}", "positive": f"d{p}", "negatives": [f"d{n}" for n in negs]} for q, p, negs in corpus.triplets),
    )
    write_qrels(out / "qrels.txt", corpus.qrels)
    write_embeddings(out / "docs.cbem", corpus.doc_ids, encode_docs_padded(corpus))
    q = np.stack(encode_queries(corpus)) if corpus.queries else np.zeros((0, corpus.config.query_len, corpus.config.dim))
    write_embeddings(out / "queries.cbem", corpus.query_ids, q)
    manifest = {
        "config": corpus.config.to_dict(),
        "num_docs": len(corpus.docs),
        "num_queries": len(corpus.queries),
        "num_triplets": len(corpus.triplets),
        "files": {name: file_digest(out / name) for name in CORPUS_FILES},
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_corpus(corpus_dir) -> SynthCorpus:
    d = Path(corpus_dir)
    with open(d / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = SynthConfig(**manifest["config"])
    docs = _read_jsonl(d / "docs.jsonl")
    queries = _read_jsonl(d / "queries.jsonl")
    train = _read_jsonl(d / "train_queries.jsonl")
    doc_pos = {r["id"]: i for i, r in enumerate(docs)}
    train_pos = {r["id"]: i for i, r in enumerate(train)}
    triplets = [
        (train_pos[r["query"]], doc_pos[r["positive"]], [doc_pos[n] for n in r["negatives"]])
        for r in _read_jsonl(d / "triplets.jsonl")
    ]
    return SynthCorpus(
        config=cfg,
        pools=[],
        docs=[r["tokens"] for r in docs],
        doc_topics=[r["topic"] for r in docs],
        queries=[r["tokens"] for r in queries],
        query_topics=[r["topic"] for r in queries],
        qrels=load_qrels(d / "qrels.txt"),
        train_queries=[r["tokens"] for r in train],
        train_query_topics=[r["topic"] for r in train],
        triplets=triplets,
    )
