import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from constbert import pooling
from constbert.cli import main
from constbert.evaluation import load_run
from constbert.index import open_index, read_embeddings, write_embeddings

SMALL_SYNTH = ["--vocab-size", "200", "--topics", "4", "--docs-per-topic", "50", "--queries-per-topic", "5",
               "--train-queries-per-topic", "20", "--seed", "3"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small corpus, 3-epoch weights and an index shared by the CLI tests."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--quiet", "--out", str(d / "corpus"), *SMALL_SYNTH]) == 0
    assert main(["train", "--quiet", "--corpus", str(d / "corpus"), "--C", "8", "--epochs", "3",
                 "--out", str(d / "w.bin")]) == 0
    assert main(["index", "--quiet", "--embeddings", str(d / "corpus" / "docs.cbem"), "--weights", str(d / "w.bin"),
                 "--alignment", "512", "--out", str(d / "idx")]) == 0
    return d


def test_synth_writes_manifest_and_is_deterministic(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "a"), *SMALL_SYNTH]) == 0
    out = capsys.readouterr()
    assert "200 docs" in out.out and "config:" in out.err
    main(["synth", "--quiet", "--out", str(tmp_path / "b"), *SMALL_SYNTH])
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma == mb and ma["num_docs"] == 200


def test_synth_bad_flag_value_exits_2(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--noise-fraction", "1.5"]) == 2
    assert "--noise-fraction" in capsys.readouterr().err


def test_unknown_subcommand_and_missing_flag_exit_2(capsys):
    assert main(["frobnicate"]) == 2
    assert main(["train"]) == 2
    assert "--corpus" in capsys.readouterr().err


def test_train_outputs(pipeline):
    w = pooling.load_weights(pipeline / "w.bin")
    assert (w.m_tokens, w.c_vectors, w.dim) == (32, 8, 16)
    rows = list(csv.reader(open(pipeline / "w.bin.loss.csv")))
    assert rows[0] == ["epoch", "loss"] and [r[0] for r in rows[1:]] == ["1", "2", "3"]


def test_zero_epochs_returns_initial_weights(pipeline, tmp_path):
    out = tmp_path / "w0.bin"
    assert main(["train", "--quiet", "--corpus", str(pipeline / "corpus"), "--C", "4", "--epochs", "0",
                 "--seed", "5", "--out", str(out)]) == 0
    np.testing.assert_array_equal(pooling.load_weights(out).data, pooling.init_weights(32, 4, 16, 5).data)
    assert len(list(csv.reader(open(str(out) + ".loss.csv")))) == 1


def test_train_rejects_bad_c(pipeline, tmp_path):
    assert main(["train", "--corpus", str(pipeline / "corpus"), "--C", "64", "--out", str(tmp_path / "w")]) == 2


def test_index_size_and_payload_ratio(tmp_path, capsys):
    rng = np.random.default_rng(0)
    write_embeddings(tmp_path / "e.cbem", [f"d{i}" for i in range(10)], rng.normal(size=(10, 64, 8)).astype(np.float32))
    pooling.save_weights(tmp_path / "w", pooling.init_weights(64, 32, 8, 0))
    assert main(["index", "--embeddings", str(tmp_path / "e.cbem"), "--weights", str(tmp_path / "w"),
                 "--out", str(tmp_path / "idx")]) == 0
    out = capsys.readouterr().out
    assert "2.00" in out
    assert (tmp_path / "idx").stat().st_size == 4096 + 10 * 4096


def test_index_bad_alignment_and_missing_weights(pipeline, tmp_path):
    emb = str(pipeline / "corpus" / "docs.cbem")
    assert main(["index", "--embeddings", emb, "--weights", str(pipeline / "w.bin"), "--alignment", "100",
                 "--out", str(tmp_path / "i")]) == 2
    assert main(["index", "--embeddings", emb, "--weights", str(tmp_path / "nope"), "--out", str(tmp_path / "i")]) == 2


def test_search_and_full_rerank_agree(pipeline, tmp_path, capsys):
    q = str(pipeline / "corpus" / "queries.cbem")
    assert main(["search", "--index", str(pipeline / "idx"), "--queries", q, "--topk", "10",
                 "--out", str(tmp_path / "s.run")]) == 0
    out = capsys.readouterr().out
    assert "queries: 20" in out and "MRT:" in out
    # candidates = every document, so reranking must reproduce exact search
    ids = open_index(pipeline / "idx").ids
    qids, _ = read_embeddings(q)
    with open(tmp_path / "all.run", "w") as fh:
        for qid in qids:
            for r, d in enumerate(ids, 1):
                fh.write(f"{qid} Q0 {d} {r} 0.0 all\n")
    assert main(["rerank", "--quiet", "--index", str(pipeline / "idx"), "--queries", q, "--candidates",
                 str(tmp_path / "all.run"), "--out", str(tmp_path / "r.run")]) == 0
    assert (tmp_path / "s.run").read_bytes() == (tmp_path / "r.run").read_bytes()


def test_rerank_unknown_candidate(pipeline, tmp_path):
    q = str(pipeline / "corpus" / "queries.cbem")
    qids, _ = read_embeddings(q)
    (tmp_path / "c.run").write_text("".join(f"{qid} Q0 ghost 1 1.0 x\n{qid} Q0 d0 2 0.5 x\n" for qid in qids))
    args = ["rerank", "--quiet", "--index", str(pipeline / "idx"), "--queries", q, "--candidates",
            str(tmp_path / "c.run"), "--out", str(tmp_path / "r.run")]
    assert main(args) == 1
    assert main(args + ["--lenient"]) == 0
    assert all(docs == [("d0", docs[0][1])] for docs in load_run(tmp_path / "r.run").values())


def test_eval_table_and_csv(pipeline, tmp_path, capsys):
    q = str(pipeline / "corpus" / "queries.cbem")
    main(["search", "--quiet", "--index", str(pipeline / "idx"), "--queries", q, "--out", str(tmp_path / "s.run")])
    capsys.readouterr()
    assert main(["eval", "--run", str(tmp_path / "s.run"), "--qrels", str(pipeline / "corpus" / "qrels.txt"),
                 "--metrics", "mrr@10,recall@5", "--csv", str(tmp_path / "m.csv")]) == 0
    assert "mrr@10" in capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["metric", "value"] and [r[0] for r in rows[1:]] == ["mrr@10", "recall@5"]
    assert all(len(r[1].split(".")[1]) == 6 for r in rows[1:])


def test_eval_unknown_metric(pipeline, capsys):
    assert main(["eval", "--run", "x", "--qrels", "y", "--metrics", "map@10"]) == 2
    assert "supported" in capsys.readouterr().err


def test_bench_command(capsys):
    assert main(["bench", "--docs", "100", "--C", "4", "--k", "8", "--repeat", "1"]) == 0
    assert "active backend" in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "constbert", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "rerank" in out.stdout


# ---------------------------------------------------------------- full-size timings


@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("full")
    assert main(["synth", "--quiet", "--out", str(d / "corpus")]) == 0
    return d


@pytest.mark.slow
def test_default_training_finishes_within_a_minute(default_corpus):
    t0 = time.perf_counter()
    assert main(["train", "--quiet", "--corpus", str(default_corpus / "corpus"), "--C", "16",
                 "--out", str(default_corpus / "w16")]) == 0
    assert time.perf_counter() - t0 < 60


@pytest.mark.slow
def test_exact_search_over_ten_thousand_docs_within_ten_seconds(default_corpus):
    w = default_corpus / "w8"
    pooling.save_weights(w, pooling.init_weights(32, 8, 16, 0))
    assert main(["index", "--quiet", "--embeddings", str(default_corpus / "corpus" / "docs.cbem"), "--weights", str(w),
                 "--out", str(default_corpus / "idx")]) == 0
    assert len(open_index(default_corpus / "idx")) == 10_000
    t0 = time.perf_counter()
    assert main(["search", "--quiet", "--index", str(default_corpus / "idx"), "--queries",
                 str(default_corpus / "corpus" / "queries.cbem"), "--out", str(default_corpus / "s.run")]) == 0
    assert time.perf_counter() - t0 < 10
