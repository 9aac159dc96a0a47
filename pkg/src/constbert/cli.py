"""``constbert`` command line: synth -> train -> index -> search/rerank -> eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import _kernels, evaluation, index as ix, pooling, retrieval, synth

logger = logging.getLogger("constbert")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _echo(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _print_config(args) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    print("config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)


def _resolve_threads(args) -> int:
    if args.threads is None:
        env = os.environ.get("CONSTBERT_THREADS")
        try:
            args.threads = int(env) if env else 1
        except ValueError:
            raise UsageError(f"CONSTBERT_THREADS must be an integer, got {env!r}") from None
    if args.threads < 1:
        raise UsageError(f"--threads must be >= 1, got {args.threads}")
    return args.threads


def _require_file(path: Path, flag: str) -> Path:
    if not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return Path(path)


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

_SYNTH_FLAGS = {
    "vocab_size": "--vocab-size",
    "num_topics": "--topics",
    "docs_per_topic": "--docs-per-topic",
    "m_tokens": "--M",
    "dim": "--k",
    "queries_per_topic": "--queries-per-topic",
    "query_len": "--query-len",
    "noise_fraction": "--noise-fraction",
    "train_queries_per_topic": "--train-queries-per-topic",
    "negatives_per_triplet": "--negatives",
    "seed": "--seed",
}


def cmd_synth(args) -> int:
    fields: dict = {}
    if args.config:
        try:
            fields.update(json.loads(_require_file(args.config, "--config").read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config: invalid JSON: {exc}") from None
    for name in _SYNTH_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            fields[name] = val
    if args.doc_len_min is not None or args.doc_len_max is not None:
        lo, hi = fields.get("doc_len_range", synth.SynthConfig.doc_len_range)
        fields["doc_len_range"] = (args.doc_len_min or lo, args.doc_len_max or hi)
    try:
        cfg = synth.SynthConfig(**fields)
    except TypeError as exc:
        raise UsageError(f"--config: {exc}") from None
    except ValueError as exc:
        msg = str(exc)
        flag = next((f for n, f in _SYNTH_FLAGS.items() if msg.startswith(n)), None)
        if flag is None and msg.startswith("doc_len_range"):
            flag = "--doc-len-min/--doc-len-max"
        raise UsageError(f"{flag}: {msg}" if flag else msg) from None
    print("resolved synth config: " + json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr)
    manifest = synth.write_corpus(synth.gen_corpus(cfg), args.out)
    _echo(args, f"wrote corpus to {args.out}: {manifest['num_docs']} docs, "
                f"{manifest['num_queries']} queries, {manifest['num_triplets']} triplets")
    for name, digest in manifest["files"].items():
        _echo(args, f"  {digest}  {name}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    corpus_dir = Path(args.corpus)
    _require_file(corpus_dir / "manifest.json", "--corpus")
    corpus = synth.read_corpus(corpus_dir)
    m = args.M or corpus.config.m_tokens
    k = args.k or corpus.config.dim
    if args.C < 1 or args.C > m:
        raise UsageError(f"--C must be in [1, M={m}], got {args.C}")
    try:
        cfg = pooling.TrainConfig(
            learning_rate=args.lr,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            normalize_pooled=args.normalize,
            loss=args.loss,
            margin=args.margin,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    triplets = synth.training_triplets(corpus, m, k)
    t0 = time.perf_counter()
    res = pooling.train_pool(
        triplets, cfg, m_tokens=m, c_vectors=args.C,
        on_epoch=lambda e, loss: _echo(args, f"epoch {e}: loss {loss:.6f}"),
    )
    elapsed = time.perf_counter() - t0
    pooling.save_weights(args.out, res.weights)
    csv_path = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for e, loss in enumerate(res.loss_trace, 1):
            w.writerow([e, f"{loss:.6f}"])
    _echo(args, f"wrote {args.out} (M={m}, C={args.C}, k={k}) and {csv_path} in {elapsed:.1f}s")
    return EXIT_OK


# --------------------------------------------------------------------------
# index
# --------------------------------------------------------------------------


def cmd_index(args) -> int:
    emb_path = _require_file(args.embeddings, "--embeddings")
    w_path = _require_file(args.weights, "--weights")
    try:
        w = pooling.load_weights(w_path)
    except ValueError as exc:
        raise UsageError(f"--weights: {exc}") from None
    try:
        ix.validate_layout(w.c_vectors, w.dim, args.alignment)
    except ValueError as exc:
        raise UsageError(f"--alignment: {exc}") from None
    ids, docs = ix.read_embeddings(emb_path)
    if docs.shape[0] and docs.shape[2] != w.dim:
        raise UsageError(f"--embeddings dim {docs.shape[2]} != weights dim {w.dim}")
    if docs.shape[1] != w.m_tokens:
        padded = np.zeros((docs.shape[0], w.m_tokens, w.dim), dtype=np.float32)
        n = min(docs.shape[1], w.m_tokens)
        padded[:, :n] = docs[:, :n]
        docs = padded
    pooled = pooling.pool_many(docs, w, normalize=args.normalize)
    header = ix.build_index(
        args.out, zip(ids, pooled), c_vectors=w.c_vectors, dim=w.dim, dtype=args.dtype,
        alignment=args.alignment, normalize_flag=args.normalize,
    )
    size = Path(args.out).stat().st_size
    expected = ix.HEADER_SIZE + header.num_docs * header.record_size
    token_payload = header.num_docs * w.m_tokens * w.dim * 4
    pooled_payload = header.num_docs * w.c_vectors * w.dim * 4
    ratio = token_payload / pooled_payload if pooled_payload else float(w.m_tokens) / w.c_vectors
    _echo(args, f"wrote {args.out}: {header.num_docs} docs, record_size {header.record_size} bytes, "
                f"file size {size} bytes (expected 4096 + {header.num_docs} x {header.record_size} = {expected})")
    _echo(args, f"token-level vs pooled payload ratio (M/C = {w.m_tokens}/{w.c_vectors}): {ratio:.2f}")
    if size != expected:
        print(f"error: index size {size} != expected {expected}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# --------------------------------------------------------------------------
# search / rerank
# --------------------------------------------------------------------------


def _search_common(args, candidates: dict | None) -> int:
    index_path = _require_file(args.index, "--index")
    q_path = _require_file(args.queries, "--queries")
    if args.topk < 1:
        raise UsageError(f"--topk must be >= 1, got {args.topk}")
    threads = _set_threads(args)
    qids, queries = ix.read_embeddings(q_path)
    run: dict = {}
    latencies: list[float] = []
    with ix.open_index(index_path) as idx:
        if queries.shape[0] and queries.shape[2] != idx.dim:
            raise UsageError(f"--queries dim {queries.shape[2]} != index dim {idx.dim}")
        if queries.shape[0] and idx.num_docs:
            # compile/warm the scan kernel outside the timed region
            _kernels.backend.scan_fixed(queries[0], idx.decode_range(0, 1), parallel=threads > 1)
        for qid, q in zip(qids, queries):
            if candidates is not None and qid not in candidates:
                if args.lenient:
                    logger.warning("no candidates for query %s; skipped", qid)
                    continue
                raise KeyError(f"no candidates for query {qid!r}")
            t0 = time.perf_counter()
            if candidates is None:
                res = retrieval.search_exact(idx, q, args.topk, parallel=threads > 1)
            else:
                res = retrieval.rerank(idx, q, candidates[qid], args.topk, lenient=args.lenient)
            latencies.append(1e3 * (time.perf_counter() - t0))
            run[qid] = [(r.external_id, r.score) for r in res]
    evaluation.write_run(args.out, run, args.tag)
    if latencies:
        s = evaluation.latency_summary(latencies)
        _echo(args, f"queries: {s.count}")
        _echo(args, f"MRT: {s.mean_ms:.3f} ms (p50 {s.p50_ms:.3f}, p95 {s.p95_ms:.3f}, p99 {s.p99_ms:.3f})")
    else:
        _echo(args, "queries: 0")
    _echo(args, f"wrote {args.out}")
    return EXIT_OK


def _set_threads(args) -> int:
    n = _resolve_threads(args)
    return _kernels.set_threads(n) if n > 1 else 1


def cmd_search(args) -> int:
    return _search_common(args, None)


def cmd_rerank(args) -> int:
    cand_run = evaluation.load_run(_require_file(args.candidates, "--candidates"))
    candidates = {qid: [d for d, _ in docs] for qid, docs in cand_run.items()}
    return _search_common(args, candidates)


# --------------------------------------------------------------------------
# eval / bench / repro
# --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    names = [m for m in args.metrics.split(",") if m.strip()]
    try:
        for name in names:
            evaluation.parse_metric(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = evaluation.load_run(_require_file(args.run, "--run"))
    qrels = evaluation.load_qrels(_require_file(args.qrels, "--qrels"))
    results = evaluation.evaluate(run, qrels, names)
    width = max(len(k) for k in results)
    for name, value in results.items():
        print(f"{name:<{width}}  {value:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for name, value in results.items():
                w.writerow([name, f"{value:.6f}"])
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import format_table, run_benchmarks

    rows = run_benchmarks(num_docs=args.docs, c_vectors=args.C, dim=args.k, query_len=args.query_len,
                          repeat=args.repeat, seed=args.seed)
    print(format_table(rows))
    print(f"active backend: {_kernels.backend.name}")
    return EXIT_OK


def cmd_repro(args) -> int:
    from .acceptance import run_all

    lines = []

    def echo(line):
        lines.append(line)
        print(line, flush=True)

    results = run_all(echo)
    passed = sum(r.passed for r in results)
    summary = f"{passed}/{len(results)} acceptance criteria passed (backend: {_kernels.backend.name})"
    echo(summary)
    Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK if passed == len(results) else EXIT_RUNTIME


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--threads", type=int, default=None,
                        help="document-scan threads for search (default: $CONSTBERT_THREADS or 1)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = _Parser(prog="constbert", description="Constant-space multi-vector retrieval toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--config", type=Path, help="JSON file with SynthConfig fields")
    s.add_argument("--out", type=Path, default=Path("corpus"))
    s.add_argument("--vocab-size", dest="vocab_size", type=int)
    s.add_argument("--topics", dest="num_topics", type=int)
    s.add_argument("--docs-per-topic", dest="docs_per_topic", type=int)
    s.add_argument("--doc-len-min", dest="doc_len_min", type=int)
    s.add_argument("--doc-len-max", dest="doc_len_max", type=int)
    s.add_argument("--M", dest="m_tokens", type=int)
    s.add_argument("--k", dest="dim", type=int)
    s.add_argument("--queries-per-topic", dest="queries_per_topic", type=int)
    s.add_argument("--query-len", dest="query_len", type=int)
    s.add_argument("--noise-fraction", "--noise", dest="noise_fraction", type=float)
    s.add_argument("--train-queries-per-topic", dest="train_queries_per_topic", type=int)
    s.add_argument("--negatives", dest="negatives_per_triplet", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train pooling weights")
    t.add_argument("--corpus", type=Path, required=True)
    t.add_argument("--C", type=int, required=True)
    t.add_argument("--M", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--loss", choices=["in_batch_softmax", "margin_triplet"], default="in_batch_softmax")
    t.add_argument("--margin", type=float, default=1.0)
    t.add_argument("--normalize", action="store_true", help="unit-normalise pooled vectors")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--loss-csv", type=Path, help="default: <out>.loss.csv")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("index", parents=[common], help="pool embeddings and build an index")
    i.add_argument("--embeddings", type=Path, required=True)
    i.add_argument("--weights", type=Path, required=True)
    i.add_argument("--dtype", choices=sorted(ix.DTYPES), default="f32")
    i.add_argument("--alignment", type=int, default=4096)
    i.add_argument("--normalize", action="store_true")
    i.add_argument("--out", type=Path, required=True)
    i.set_defaults(func=cmd_index)

    for name, fn, helptext in (("search", cmd_search, "exhaustive top-k search"),
                               ("rerank", cmd_rerank, "rerank a candidate run")):
        r = sub.add_parser(name, parents=[common], help=helptext)
        r.add_argument("--index", type=Path, required=True)
        r.add_argument("--queries", type=Path, required=True)
        r.add_argument("--topk", type=int, default=10)
        r.add_argument("--candidates", type=Path, required=(name == "rerank"))
        r.add_argument("--lenient", action="store_true", help="skip unknown candidate ids")
        r.add_argument("--out", type=Path, required=True)
        r.add_argument("--tag", default="constbert")
        r.set_defaults(func=fn)

    e = sub.add_parser("eval", parents=[common], help="evaluate a run against qrels")
    e.add_argument("--run", type=Path, required=True)
    e.add_argument("--qrels", type=Path, required=True)
    e.add_argument("--metrics", default="mrr@10,ndcg@10,recall@50,recall@200,recall@1000")
    e.add_argument("--csv", type=Path)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="compare numba and numpy kernels")
    b.add_argument("--docs", type=int, default=10_000)
    b.add_argument("--C", type=int, default=32)
    b.add_argument("--k", type=int, default=16)
    b.add_argument("--query-len", type=int, default=8)
    b.add_argument("--repeat", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    rp = sub.add_parser("repro", parents=[common], help="run every acceptance criterion")
    rp.add_argument("--out", type=Path, default=Path("acceptance_report.txt"))
    rp.set_defaults(func=cmd_repro)
    return p


_SEED_DEFAULTS = {"synth": None, "train": 0, "bench": 0}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.seed is None and _SEED_DEFAULTS.get(args.command) is not None:
            args.seed = _SEED_DEFAULTS[args.command]
        logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _print_config(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError, OSError, ix.IndexFileError, pooling.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
